use cebmv::checkpoint::{stack_from_bytes, stack_to_bytes};
use cebmv::config::RunConfig;
use cebmv::evaluation::{all_suites, extract_features, linear_probe, robustness_eval};
use cebmv::experiments::{datasets, run_cell_on};
use cebmv::lipschitz::{self, Kappas, LipschitzOptions, Perturbation};
use cebmv::losses::{LossConfig, Variant};
use cebmv::training::train;

fn small(variant: Variant) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n_train = 512;
    c.data.n_test = 256;
    c.train.epochs = 2;
    c.train.batch_size = 64;
    c.train.warmup_epochs = 0.5;
    c.train.loss = LossConfig::new(variant);
    c.resolved()
}

#[test]
fn every_variant_trains_and_probes() {
    for v in Variant::ALL {
        let cfg = small(v);
        let (tr, te) = datasets(&cfg).unwrap();
        let cell = run_cell_on(&cfg, &tr, &te).unwrap();
        assert!(!cell.collapsed(), "{v:?} collapsed");
        assert_eq!(cell.outcome.metrics.len(), 2);
        assert!(cell.outcome.metrics.iter().all(|m| m.loss.is_finite()));
        let top1 = cell.top1().unwrap();
        assert!(top1 > 0.1, "{v:?} at chance: {top1}");
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = small(Variant::CSimclr);
    let (tr, _) = datasets(&cfg).unwrap();
    let a = train(&cfg.train, &tr).unwrap();
    let b = train(&cfg.train, &tr).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(stack_to_bytes(&a.stack, &a.meta()).unwrap(), stack_to_bytes(&b.stack, &b.meta()).unwrap());
    assert_eq!(a.metrics_jsonl().unwrap(), b.metrics_jsonl().unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_features() {
    let cfg = small(Variant::CByol);
    let (tr, te) = datasets(&cfg).unwrap();
    let out = train(&cfg.train, &tr).unwrap();
    let bytes = stack_to_bytes(&out.stack, &out.meta()).unwrap();
    let (stack, meta) = stack_from_bytes(&bytes).unwrap();
    assert_eq!(meta, out.meta());
    let x = te.features().unwrap();
    assert_eq!(extract_features(&stack, &x).unwrap(), extract_features(&out.stack, &x).unwrap());
    assert!(stack_from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn robustness_and_smoothness_run_on_a_trained_stack() {
    let cfg = small(Variant::CSimclr);
    let (tr, te) = datasets(&cfg).unwrap();
    let out = train(&cfg.train, &tr).unwrap();
    let ftr = extract_features(&out.stack, &tr.features().unwrap()).unwrap();
    let fte = extract_features(&out.stack, &te.features().unwrap()).unwrap();
    let (probe, res) = linear_probe(&ftr, &tr.labels(), &fte, &te.labels(), 1.0, 0).unwrap();
    let sigma = tr.feature_std();
    let rows = robustness_eval(&out.stack, &probe, &te, &sigma, &all_suites(), 0).unwrap();
    assert_eq!(rows.len(), 26);
    assert_eq!(rows[0].top1, res.top1);
    let opts = LipschitzOptions { n_pairs: 32, ..Default::default() };
    let rep = lipschitz::smoothness_report(
        &out.stack,
        Kappas::from_loss(&cfg.train.loss),
        &te,
        &sigma,
        &Perturbation::ALL,
        &opts,
    )
    .unwrap();
    assert_eq!(rep.families.len(), 8);
    for f in &rep.families {
        assert_eq!(f.records.len(), 32);
        assert!(f.records.iter().all(|r| r.kl_forward >= 0.0 && r.squared_bound.is_finite()));
    }
}
