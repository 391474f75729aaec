#[macro_use]
mod common;

use common::{max_abs_diff, random_batch, randomize};
use tpamtl::diffcore::{Graph, RngStream};
use tpamtl::error::Error;
use tpamtl::model::{
    predict_proba_with, transfer_graphs, AlphaNorm, ForwardOpts, Mode, Model, ModelConfig, Scope, TemporalAmtl,
    TransferMode, UncertaintyMode,
};
use tpamtl::variants::{
    amtl_loss_weight, build, kendall_weighted_loss, AmtlLoss, Family, TaskLossTracker, VariantSpec,
};

fn train_opts() -> ForwardOpts {
    ForwardOpts {
        mode: Mode::Train,
        ..ForwardOpts::eval()
    }
}

#[test]
fn stl_parameters_are_disjoint_per_task() {
    let cfg = ModelConfig::new(3, 4, 3);
    let mut model = build(&VariantSpec::new(Family::Stl), &cfg, 0).unwrap();
    let names: Vec<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
    for n in &names {
        assert!(
            (0..3).filter(|d| n.starts_with(&format!("task{d}/"))).count() == 1,
            "{n}"
        );
    }
    for d in 0..3 {
        let count = names.iter().filter(|n| n.starts_with(&format!("task{d}/"))).count();
        assert_eq!(count * 3, names.len());
    }
    assert_eq!(model.scopes().len(), 3);

    randomize(model.store_mut(), 1, 0.5);
    let mut batch = random_batch(2, 5, 3, 4, 3, None, 1.0);
    for b in 0..5 {
        batch.mask[b * 3 + 1] = false;
        batch.mask[b * 3 + 2] = false;
    }
    let scope = Scope::all(model.store());
    let mut g = Graph::with_params(model.store());
    let fwd = model
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::train())
        .unwrap();
    let obj = model.objective(&mut g, &fwd, &batch, 0.01, &scope).unwrap();
    g.backward(obj.total).unwrap();
    for (id, p) in model.store().iter() {
        let norm = g.param_grad(id).max_abs();
        if p.name.starts_with("task0/") {
            assert!(norm > 0.0, "{}", p.name);
        } else {
            assert_eq!(norm, 0.0, "{}", p.name);
        }
    }
}

#[test]
fn stl_predictions_do_not_depend_on_other_towers() {
    let cfg = ModelConfig::new(3, 2, 3);
    let mut a = build(&VariantSpec::new(Family::Stl), &cfg, 0).unwrap();
    randomize(a.store_mut(), 1, 0.5);
    let mut b = build(&VariantSpec::new(Family::Stl), &cfg, 0).unwrap();
    b.store_mut().load_from(a.store()).unwrap();
    for id in b.store().ids_with_prefix("task1/") {
        b.store_mut().value_mut(id).data_mut().fill(0.3);
    }
    let batch = random_batch(3, 4, 3, 2, 3, None, 1.0);
    let pa = predict_proba_with(a.as_ref(), &batch, &mut RngStream::new(0), 8, ForwardOpts::eval()).unwrap();
    let pb = predict_proba_with(b.as_ref(), &batch, &mut RngStream::new(0), 8, ForwardOpts::eval()).unwrap();
    assert_eq!(pa[0], pb[0]);
    assert_eq!(pa[2], pb[2]);
    assert!(max_abs_diff(&pa[1], &pb[1]) > 0.0);
}

fn transfer_none_equals_the_no_transfer_ablation() {
    let mut cfg = ModelConfig::new(3, 3, 4);
    cfg.dropout_rate = 0.2;
    let none = build(
        &VariantSpec::new(Family::TpAmtl).with_transfer(TransferMode::None),
        &cfg,
        5,
    )
    .unwrap();
    let mut full = TemporalAmtl::new(cfg.clone(), 5).unwrap();
    randomize(full.store_mut(), 2, 0.5);
    let mut none = none;
    let loaded = none.store_mut().load_from(full.store()).unwrap();
    assert_eq!(loaded, none.store().len());
    assert!(none.store().len() < full.store().len());
    let batch = random_batch(6, 5, 4, 3, 3, Some(&[4, 2, 4, 1, 3]), 1.0);
    for opts in [ForwardOpts::eval(), train_opts()] {
        let ablated = ForwardOpts {
            no_transfer: true,
            ..opts
        };
        let a = predict_proba_with(none.as_ref(), &batch, &mut RngStream::new(9), 8, opts).unwrap();
        let b = predict_proba_with(&full, &batch, &mut RngStream::new(9), 8, ablated).unwrap();
        for d in 0..3 {
            assert!(max_abs_diff(&a[d], &b[d]) < 1e-12);
        }
    }
    let mut g = Graph::with_params(none.store());
    let fwd = none
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::eval())
        .unwrap();
    assert!(fwd.alphas.is_empty());
}

fn p_amtl_equals_single_step_samestep_transfer() {
    for norm in [AlphaNorm::Sigmoid, AlphaNorm::Softmax] {
        for uncertainty in [
            UncertaintyMode::Both,
            UncertaintyMode::Epistemic,
            UncertaintyMode::Aleatoric,
        ] {
            let mut cfg = ModelConfig::new(3, 4, 5);
            cfg.dropout_rate = 0.25;
            cfg.alpha_norm = norm;
            cfg.uncertainty = uncertainty;
            let mut p = build(&VariantSpec::new(Family::PAmtl), &cfg, 11).unwrap();
            let mut t = build(
                &VariantSpec::new(Family::TpAmtl).with_transfer(TransferMode::Samestep),
                &cfg,
                11,
            )
            .unwrap();
            let names = |m: &dyn Model| m.store().iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>();
            assert_eq!(names(p.as_ref()), names(t.as_ref()));
            randomize(p.store_mut(), 3, 0.6);
            randomize(t.store_mut(), 3, 0.6);
            let batch = random_batch(4, 7, 1, 4, 3, None, 1.0);
            for opts in [ForwardOpts::eval(), train_opts()] {
                let a = predict_proba_with(p.as_ref(), &batch, &mut RngStream::new(21), 16, opts).unwrap();
                let b = predict_proba_with(t.as_ref(), &batch, &mut RngStream::new(21), 16, opts).unwrap();
                for d in 0..3 {
                    let diff = max_abs_diff(&a[d], &b[d]);
                    assert!(diff < 1e-12, "{norm:?} {uncertainty:?} {:?}: {diff}", opts.mode);
                }
            }
        }
    }
}

#[test]
fn p_amtl_rejects_sequences() {
    let p = build(&VariantSpec::new(Family::PAmtl), &ModelConfig::new(2, 3, 3), 0).unwrap();
    let batch = random_batch(0, 2, 2, 3, 2, None, 1.0);
    let mut g = Graph::with_params(p.store());
    assert!(p
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::eval())
        .is_err());
}

fn td_amtl_forward_is_rng_independent() {
    let mut cfg = ModelConfig::new(3, 3, 4);
    cfg.dropout_rate = 0.3;
    let mut model = build(&VariantSpec::new(Family::TdAmtl), &cfg, 2).unwrap();
    assert_eq!(model.config().uncertainty, UncertaintyMode::None);
    randomize(model.store_mut(), 4, 0.5);
    let batch = random_batch(5, 6, 4, 3, 3, Some(&[4, 3, 4, 2, 4, 1]), 1.0);
    let a = predict_proba_with(model.as_ref(), &batch, &mut RngStream::new(1), 8, ForwardOpts::eval()).unwrap();
    let b = predict_proba_with(model.as_ref(), &batch, &mut RngStream::new(777), 8, ForwardOpts::eval()).unwrap();
    assert_eq!(a, b);

    cfg.dropout_rate = 0.0;
    let mut model = build(&VariantSpec::new(Family::TdAmtl), &cfg, 2).unwrap();
    randomize(model.store_mut(), 4, 0.5);
    let a = predict_proba_with(model.as_ref(), &batch, &mut RngStream::new(1), 8, train_opts()).unwrap();
    let b = predict_proba_with(model.as_ref(), &batch, &mut RngStream::new(777), 8, train_opts()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inconsistent_specs_are_rejected() {
    let cfg = ModelConfig::new(2, 3, 3);
    let bad = [
        VariantSpec::new(Family::TdAmtl).with_uncertainty(UncertaintyMode::Epistemic),
        VariantSpec::new(Family::PAmtl).with_transfer(TransferMode::Full),
        VariantSpec::new(Family::Mtl).with_transfer(TransferMode::Full),
        VariantSpec::new(Family::AmtlLoss).with_uncertainty(UncertaintyMode::Both),
        VariantSpec {
            shared_parameters: Some(true),
            ..VariantSpec::new(Family::Stl)
        },
    ];
    for spec in bad {
        assert!(build(&spec, &cfg, 0).is_err(), "{}", spec.label());
    }
}

#[test]
fn variants_without_transfer_export_empty_graphs() {
    let cfg = ModelConfig::new(2, 3, 3);
    let batch = random_batch(0, 3, 2, 3, 2, None, 1.0);
    for spec in [
        VariantSpec::new(Family::Stl),
        VariantSpec::new(Family::Mtl),
        VariantSpec::new(Family::MtlKendall),
        VariantSpec::new(Family::TpAmtl).with_transfer(TransferMode::None),
    ] {
        let model = build(&spec, &cfg, 0).unwrap();
        assert!(transfer_graphs(model.as_ref(), &batch, &mut RngStream::new(0))
            .unwrap()
            .is_empty());
    }
    let model = build(&VariantSpec::new(Family::TpAmtl), &cfg, 0).unwrap();
    let graphs = transfer_graphs(model.as_ref(), &batch, &mut RngStream::new(0)).unwrap();
    assert_eq!(graphs.len(), 3);
}

#[test]
fn amtl_loss_weight_examples() {
    let cfg = ModelConfig::new(3, 3, 4);
    let mut model = AmtlLoss::new(cfg.clone(), 0).unwrap();
    assert!(matches!(model.transfer_weight(0, 1), Err(Error::EmptyTracker(0))));
    let batch = random_batch(1, 4, 2, 3, 3, None, 1.0);
    let mut g = Graph::with_params(model.store());
    assert!(model
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::eval())
        .is_err());

    let ids: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("transfer/") && p.name.contains("/out/"))
        .map(|(id, _)| id)
        .collect();
    for &id in &ids {
        model.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    for (ls, lt) in [(0.1, 2.0), (5.0, 0.0), (0.7, 0.7)] {
        assert_eq!(amtl_loss_weight(&model, 0, 1, ls, lt).unwrap(), 0.5);
    }

    let mut model = AmtlLoss::new(cfg, 3).unwrap();
    randomize(model.store_mut(), 8, 2.0);
    let mut rng = RngStream::new(4);
    for _ in 0..200 {
        let (ls, lt) = (rng.uniform_range(0.0, 5.0), rng.uniform_range(0.0, 5.0));
        let a = amtl_loss_weight(&model, 2, 0, ls, lt).unwrap();
        assert!(a > 0.0 && a < 1.0);
    }

    let src: Vec<_> = model.store().ids_with_prefix("transfer/0->1/");
    let dst: Vec<_> = model.store().ids_with_prefix("transfer/1->0/");
    for (s, d) in src.iter().zip(&dst) {
        let v = model.store().value(*s).clone();
        *model.store_mut().value_mut(*d) = v;
    }
    let mut tracker = TaskLossTracker::new(3);
    tracker.update(&[Some(0.6), Some(0.6), Some(0.2)]);
    model.set_tracker(tracker).unwrap();
    assert_eq!(
        model.transfer_weight(0, 1).unwrap(),
        model.transfer_weight(1, 0).unwrap()
    );
    assert!(model.transfer_weight(0, 3).is_err());
}

#[test]
fn loss_tracker_is_an_exponential_average() {
    let mut t = TaskLossTracker::new(2);
    t.update(&[Some(1.0), None]);
    assert!(t.values().is_err());
    t.update(&[Some(2.0), Some(f64::NAN)]);
    assert!(t.values().is_err());
    t.update(&[None, Some(3.0)]);
    let v = t.values().unwrap();
    assert!((v[0] - (0.99 + 0.01 * 2.0)).abs() < 1e-15);
    assert_eq!(v[1], 3.0);
}

#[test]
fn amtl_loss_prepare_seeds_the_tracker() {
    let cfg = ModelConfig::new(2, 3, 3);
    let mut model = build(&VariantSpec::new(Family::AmtlLoss), &cfg, 0).unwrap();
    let batch = random_batch(1, 6, 2, 3, 2, None, 1.0);
    model.prepare(&batch, &mut RngStream::new(0)).unwrap();
    let state: TaskLossTracker = serde_json::from_value(model.extra_state()).unwrap();
    let v = state.values().unwrap();
    assert!(v.iter().all(|&l| l.is_finite() && l > 0.0));
    let mut g = Graph::with_params(model.store());
    let fwd = model
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::eval())
        .unwrap();
    assert!(!fwd.alphas.is_empty());
}

#[test]
fn kendall_examples() {
    assert_eq!(kendall_weighted_loss(&[0.3, 1.7, 2.0], &[0.0; 3]), 4.0);
    let single = kendall_weighted_loss(&[2.0], &[2f64.ln()]);
    assert!((single - (0.5 + 2f64.ln())).abs() < 1e-12);
    assert!((single - 1.1931).abs() < 5e-5);

    for l in [0.1, 0.8, 2.0, 7.5] {
        // Golden-section search over ln σ.
        let f = |s: f64| kendall_weighted_loss(&[l], &[s]);
        let (mut a, mut b) = (-5.0, 5.0);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let sigma = ((a + b) / 2.0).exp();
        assert!((sigma - (2.0 * l).sqrt()).abs() < 1e-6, "L={l}: {sigma}");
    }
}

#[test]
fn kendall_objective_matches_the_formula_and_trains_sigma() {
    let cfg = ModelConfig::new(3, 3, 3);
    let mut model = build(&VariantSpec::new(Family::MtlKendall), &cfg, 0).unwrap();
    let ls = model.store().id("kendall/log_sigma").unwrap();
    model
        .store_mut()
        .value_mut(ls)
        .data_mut()
        .copy_from_slice(&[0.2, -0.4, 0.9]);
    let batch = random_batch(2, 5, 2, 3, 3, None, 1.0);
    let scope = Scope::all(model.store());
    let mut g = Graph::with_params(model.store());
    let fwd = model
        .forward(&mut g, &batch, &mut RngStream::new(0), ForwardOpts::eval())
        .unwrap();
    let obj = model.objective(&mut g, &fwd, &batch, 0.0, &scope).unwrap();
    let losses: Vec<f64> = obj.task_losses.iter().map(|l| g.value(l.unwrap()).item()).collect();
    let want = kendall_weighted_loss(&losses, &[0.2, -0.4, 0.9]);
    assert!((g.value(obj.total).item() - want).abs() < 1e-12);
    g.backward(obj.total).unwrap();
    let grad = g.param_grad(ls);
    assert!(grad.data().iter().all(|&x| x != 0.0));
    assert!(g.param_grad(model.store().id("task0/out/weight").unwrap()).max_abs() > 0.0);
}

acceptance_checks!(
    p_amtl_equals_single_step_samestep_transfer,
    transfer_none_equals_the_no_transfer_ablation,
    td_amtl_forward_is_rng_independent,
);
