//! `log I_v(x)`, the log of the modified Bessel function of the first kind.
//!
//! Three regimes, all evaluated in log space:
//!
//! - ascending power series with running rescaling, for small arguments and
//!   for moderate orders where the large-argument expansion does not apply;
//! - Debye's uniform expansion in the order for `v >= 40`;
//! - Hankel's large-argument expansion for `v < 40` and `x >> v^2`.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const MAX_ORDER: f64 = 512.0;
pub const MAX_ARG: f64 = 1e5;

const DEBYE_MIN_ORDER: f64 = 40.0;
const DEBYE_TERMS: usize = 9;

/// `log I_v(x)` for `v` in `[0, 512]` and `x` in `(0, 1e5]`.
pub fn log_bessel_i(v: f64, x: f64) -> Result<f64> {
    if !(0.0..=MAX_ORDER).contains(&v) || !v.is_finite() {
        return Err(Error::domain(format!("bessel order {v} outside [0, {MAX_ORDER}]")));
    }
    if !(x > 0.0 && x <= MAX_ARG) {
        return Err(Error::domain(format!("bessel argument {x} outside (0, {MAX_ARG}]")));
    }
    let out = if x < (v / 2.0).max(8.0) {
        series(v, x)
    } else if v >= DEBYE_MIN_ORDER {
        debye(v, x)
    } else if x >= 50.0 + v * v / 2.0 {
        hankel(v, x)
    } else {
        series(v, x)
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::Numeric(format!("log_bessel_i({v}, {x}) not finite")))
    }
}

/// `sum_k (x/2)^(2k+v) / (k! Gamma(k+v+1))`, all terms positive.
fn series(v: f64, x: f64) -> f64 {
    const RESCALE: f64 = 1e280;
    let q = x * x / 4.0;
    // `rest` accumulates terms k >= 1 relative to the k = 0 term, so that
    // log(1 + rest) keeps full precision for tiny arguments.
    let mut term = 1.0f64;
    let mut rest = 0.0f64;
    let mut log_scale = 0.0f64;
    let mut head = 1.0f64;
    let mut k = 0.0f64;
    loop {
        k += 1.0;
        term *= q / (k * (k + v));
        rest += term;
        if rest > RESCALE {
            rest /= RESCALE;
            term /= RESCALE;
            head /= RESCALE;
            log_scale += RESCALE.ln();
        }
        if term <= (head + rest) * 1e-17 && k > x / 2.0 {
            break;
        }
    }
    let log_sum = if log_scale == 0.0 {
        rest.ln_1p()
    } else {
        (head + rest).ln() + log_scale
    };
    v * (x / 2.0).ln() - ln_gamma(v + 1.0) + log_sum
}

fn hankel(v: f64, x: f64) -> f64 {
    let mu = 4.0 * v * v;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..64 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (8.0 * x * k as f64);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// Coefficients of Debye's polynomials `u_k(p)`, lowest degree first,
/// generated from `u_{k+1} = p^2 (1 - p^2) u_k' / 2 + 1/8 int_0^p (1 - 5t^2) u_k`.
fn debye_polys() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys = vec![vec![1.0]];
        for _ in 1..DEBYE_TERMS {
            let u = polys.last().unwrap();
            let mut next = vec![0.0; u.len() + 3];
            // p^2 (1 - p^2) / 2 * u'
            for (i, &c) in u.iter().enumerate().skip(1) {
                let d = c * i as f64;
                next[i + 1] += 0.5 * d;
                next[i + 3] -= 0.5 * d;
            }
            // 1/8 * int_0^p (1 - 5 t^2) u(t) dt
            for (i, &c) in u.iter().enumerate() {
                next[i + 1] += c / (8.0 * (i + 1) as f64);
                next[i + 3] -= 5.0 * c / (8.0 * (i + 3) as f64);
            }
            polys.push(next);
        }
        polys
    })
}

fn debye(v: f64, x: f64) -> f64 {
    let z = x / v;
    let sq = (1.0 + z * z).sqrt();
    let p = 1.0 / sq;
    let eta = sq + z.ln() - (1.0 + sq).ln();
    let mut sum = 0.0;
    let mut vk = 1.0;
    for poly in debye_polys() {
        let u = poly.iter().rev().fold(0.0, |acc, &c| acc * p + c);
        sum += u / vk;
        vk *= v;
    }
    v * eta - 0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq.ln() + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(v, x, log I_v(x))` from a 50-digit evaluation of the ascending series.
    pub(crate) const ORACLE: &[(f64, f64, f64)] = &[
        (0.0, 0.001, 2.4999998437500173611e-7),
        (0.0, 1.0, 0.23591435850717864869),
        (0.0, 10.0, 7.9429720831186955545),
        (0.0, 100.0, 96.779732689942583717),
        (0.0, 10000.0, 9994.475903781432301),
        (1.0, 0.001, -7.6009023345420849656),
        (1.0, 1.0, -0.57064798749083128142),
        (1.0, 10.0, 7.8902038341042122935),
        (1.0, 100.0, 96.774707457591448463),
        (1.0, 10000.0, 9994.4758537789320718),
        (3.0, 0.001, -24.594466785354302476),
        (3.0, 1.0, -3.8090863032394225),
        (3.0, 10.0, 7.4721486171486274998),
        (3.0, 100.0, 96.734508690490960592),
        (3.0, 10000.0, 9994.4754537589332391),
        (7.0, 0.001, -61.731478546609990885),
        (7.0, 1.0, -13.345995653624480248),
        (7.0, 10.0, 5.4723781669517725639),
        (7.0, 100.0, 96.533597175032079137),
        (7.0, 10000.0, 9994.4734536590190997),
        (31.0, 0.001, -313.72019979130736384),
        (31.0, 1.0, -99.571974575165503456),
        (31.0, 10.0, -27.427374064197923471),
        (31.0, 100.0, 91.988975079706840893),
        (31.0, 10000.0, 9994.4278514171634661),
        (127.0, 0.001, -1456.8680605831893384),
        (127.0, 1.0, -579.58118704419640993),
        (127.0, 10.0, -286.95966840529008013),
        (127.0, 100.0, 23.559676930161610736),
        (127.0, 10000.0, 9993.6694242966513131),
        (511.0, 0.001, -6563.8833038268246807),
        (511.0, 1.0, -3034.0198679864233049),
        (511.0, 10.0, -1857.3505479459571311),
        (511.0, 100.0, -675.91852719913484281),
        (511.0, 10000.0, 9981.4220405436770329),
    ];

    /// Additional points around regime boundaries and vMF use sites.
    pub(crate) const ORACLE_EXTRA: &[(f64, f64, f64)] = &[
        (0.5, 2.0, 0.71600242968946804298),
        (1.5, 5.0, 3.0532670568400184851),
        (0.5, 5.0, 3.2762971096179065817),
        (4.0, 10.0, 7.1119121488375506102),
        (3.0, 10.0, 7.4721486171486274998),
        (32.0, 1024.0, 1019.1152440923088745),
        (31.0, 1024.0, 1019.1460159823953432),
        (15.0, 10.0, -2.2597987183547815924),
        (16.0, 10.0, -3.5048842933639708021),
        (15.0, 1024.0, 1019.5055326818538735),
        (16.0, 1024.0, 1019.4903891445590585),
        (15.0, 16384.0, 16378.22217216834323),
        (16.0, 16384.0, 16378.221226094689737),
        (0.0, 8.0, 6.0581042554278139454),
        (0.0, 50.0, 47.127575501871804584),
        (2.0, 30.0, 27.316908587411340625),
        (10.0, 40.0, 35.980616433704606177),
        (39.5, 60.0, 44.360792842434403396),
        (40.0, 60.0, 44.048018676691870229),
        (20.0, 300.0, 295.56205485176293101),
        (0.0, 100000.0, 99993.324599984316463),
        (511.0, 100000.0, 99992.018991297291078),
        (255.0, 100000.0, 99992.999473534855903),
        (3.0, 0.5, -5.9350418822463926495),
        (100.0, 0.01, -893.57111196284240363),
        (0.5, 0.001, -3.6796688254691348369),
        (1.0, 16384.0, 16378.229008313993587),
        (0.0, 16384.0, 16378.229038832503087),
        (4.0, 32.0, 29.09847443299614832),
        (3.0, 32.0, 29.209375490787086046),
        (0.5, 0.1, -1.3754177876781697859),
        (0.5, 1.0, -0.064351991073531798753),
        (0.5, 10.0, 7.9297689182371507916),
        (0.5, 100.0, 96.778476373801281574),
        (2.0, 0.001, -15.894952016310777525),
        (2.0, 1.0, -1.9969574859357673329),
    ];

    #[test]
    fn matches_extended_precision_grid() {
        for &(v, x, want) in ORACLE.iter().chain(ORACLE_EXTRA) {
            let got = log_bessel_i(v, x).unwrap();
            let rel = (got - want).abs() / want.abs();
            assert!(rel <= 1e-8, "v={v} x={x}: {got} vs {want} (rel {rel:e})");
        }
    }

    #[test]
    fn half_integer_closed_form() {
        // I_{1/2}(x) = sinh(x) sqrt(2 / (pi x))
        for x in [0.1f64, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0, 1000.0] {
            let closed = if x < 20.0 {
                (x.sinh() * (2.0 / (std::f64::consts::PI * x)).sqrt()).ln()
            } else {
                x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2
                    + 0.5 * (2.0 / (std::f64::consts::PI * x)).ln()
            };
            let got = log_bessel_i(0.5, x).unwrap();
            assert!((got - closed).abs() <= 1e-12 * closed.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn regime_boundaries_are_continuous() {
        for v in [0.0, 2.5, 10.0, 39.5, 40.0, 120.0] {
            for x in [8.0, 50.0 + v * v / 2.0, (v / 2.0f64).max(8.0)] {
                let lo = log_bessel_i(v, x * (1.0 - 1e-9)).unwrap();
                let hi = log_bessel_i(v, x * (1.0 + 1e-9)).unwrap();
                assert!((hi - lo).abs() < 1e-7 * lo.abs().max(1.0), "v={v} x={x}: {lo} {hi}");
            }
        }
    }

    #[test]
    fn monotone_in_argument() {
        for v in [0.0, 1.0, 3.0, 15.0, 31.0, 127.0, 255.0] {
            let mut prev = f64::NEG_INFINITY;
            let mut x = 1e-3;
            while x <= 1e5 {
                let cur = log_bessel_i(v, x).unwrap();
                assert!(cur > prev, "v={v} x={x}");
                prev = cur;
                x *= 1.7;
            }
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(log_bessel_i(-1.0, 1.0).is_err());
        assert!(log_bessel_i(600.0, 1.0).is_err());
        assert!(log_bessel_i(1.0, 0.0).is_err());
        assert!(log_bessel_i(1.0, 2e5).is_err());
    }

    #[test]
    fn debye_polynomials_match_known_forms() {
        let polys = debye_polys();
        // u_1 = (3p - 5p^3) / 24
        assert!((polys[1][1] - 3.0 / 24.0).abs() < 1e-15);
        assert!((polys[1][3] + 5.0 / 24.0).abs() < 1e-15);
        // u_2 = (81p^2 - 462p^4 + 385p^6) / 1152
        assert!((polys[2][2] - 81.0 / 1152.0).abs() < 1e-15);
        assert!((polys[2][4] + 462.0 / 1152.0).abs() < 1e-15);
        assert!((polys[2][6] - 385.0 / 1152.0).abs() < 1e-15);
    }
}
