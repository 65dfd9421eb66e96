use pacbayes::autodiff::{Tape, Tensor};
use pacbayes::bayes::{kl_divergence, kl_layerwise, kl_scalar, PosteriorSpec, PriorKind, PriorSpec};
use pacbayes::certify::{correction_eta, lipschitz_constants, CertificateParams};
use pacbayes::config::RunConfig;
use pacbayes::data::{gen_blobs, split_stratified};
use pacbayes::kbound::{log_moments, solve_kmin, GammaGrid};
use pacbayes::nn::{ce_loss, MlpModel};
use pacbayes::pacloss::{optimal_gamma, GammaMode, PacBayesConfig, PacLossBreakdown};
use pacbayes::trainer;
use proptest::prelude::*;

fn sizes_for(d: usize, cuts: &[usize]) -> Vec<usize> {
    let mut cuts: Vec<usize> = cuts.iter().map(|c| 1 + c % d.max(1)).filter(|&c| c < d).collect();
    cuts.sort();
    cuts.dedup();
    let mut out = Vec::new();
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(d)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

prop_compose! {
    fn instance()(d in 1usize..10)(
        mean in prop::collection::vec(-2.0f64..2.0, d),
        log_var in prop::collection::vec(-3.0f64..1.0, d),
        anchor in prop::collection::vec(-2.0f64..2.0, d),
        cuts in prop::collection::vec(0usize..100, 0..4),
        b in prop::collection::vec(-3.0f64..1.0, 4),
    ) -> (PosteriorSpec, Vec<f64>, Vec<usize>, Vec<f64>) {
        let sizes = sizes_for(mean.len(), &cuts);
        let b = b[..sizes.len()].to_vec();
        (PosteriorSpec::new(mean, log_var).unwrap(), anchor, sizes, b)
    }
}

fn losses() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 2usize..30).prop_flat_map(|(n, m)| prop::collection::vec(prop::collection::vec(0.0f64..3.0, m), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_nonnegative((post, anchor, sizes, b) in instance()) {
        let layer = PriorSpec::new(anchor.clone(), PriorKind::Layerwise, b.clone(), sizes.clone()).unwrap();
        prop_assert!(kl_layerwise(&post, &layer).unwrap() >= -1e-12);
        let scalar = PriorSpec::new(anchor, PriorKind::Scalar, vec![b[0]], sizes).unwrap();
        prop_assert!(kl_scalar(&post, &scalar).unwrap() >= -1e-12);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior((post, anchor, sizes, b) in instance()) {
        let prior = PriorSpec::new(anchor.clone(), PriorKind::Layerwise, b.clone(), sizes).unwrap();
        let index = prior.log_var_index();
        let at = PosteriorSpec::new(anchor, index.iter().map(|&g| prior.log_var[g]).collect()).unwrap();
        prop_assert!(kl_divergence(&at, &prior).unwrap().abs() < 1e-9);
        let off = kl_divergence(&post, &prior).unwrap();
        let dist: f64 = post.mean.iter().zip(&prior.anchor).map(|(a, b)| (a - b).powi(2)).sum();
        if dist > 1e-6 {
            prop_assert!(off > 0.0);
        }
    }

    #[test]
    fn uniform_layerwise_equals_scalar((post, anchor, sizes, b) in instance()) {
        let scalar = PriorSpec::new(anchor.clone(), PriorKind::Scalar, vec![b[0]], sizes.clone()).unwrap();
        let uniform = PriorSpec::new(anchor, PriorKind::Layerwise, vec![b[0]; sizes.len()], sizes).unwrap();
        let a = kl_scalar(&post, &scalar).unwrap();
        prop_assert!((a - kl_layerwise(&post, &uniform).unwrap()).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn kl_grows_with_distance((post, anchor, sizes, b) in instance(), t in 1.01f64..3.0) {
        let prior = PriorSpec::new(anchor.clone(), PriorKind::Scalar, vec![b[0]], sizes).unwrap();
        let dist: f64 = post.mean.iter().zip(&anchor).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assume!(dist > 1e-6);
        let far: Vec<f64> = post.mean.iter().zip(&anchor).map(|(h, a)| a + t * (h - a)).collect();
        let far = PosteriorSpec::new(far, post.log_var.clone()).unwrap();
        prop_assert!(kl_scalar(&far, &prior).unwrap() > kl_scalar(&post, &prior).unwrap());
    }

    #[test]
    fn k_hat_is_feasible_and_minimal(l in losses()) {
        let grid = GammaGrid::uniform(0.5, 10.0, 50).unwrap();
        let lm = log_moments(&l, &grid).unwrap();
        let k = solve_kmin(&grid, &lm).unwrap();
        prop_assert!(k >= 0.0);
        prop_assert_eq!(k == 0.0, lm.iter().all(|&x| x <= 0.0));
        let mut tight = false;
        for (g, x) in grid.points().iter().zip(&lm) {
            let slack = g * g * k - x;
            prop_assert!(slack >= -1e-12);
            tight |= slack.abs() <= 1e-12 * x.abs().max(1.0);
        }
        prop_assert!(tight || k == 0.0);
    }

    #[test]
    fn k_hat_grows_under_refinement(l in losses(), extra in prop::collection::vec(0.5f64..10.0, 1..20)) {
        let coarse = GammaGrid::uniform(0.5, 10.0, 20).unwrap();
        let mut pts = coarse.points().to_vec();
        pts.extend(extra);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let fine = GammaGrid::from_points(pts).unwrap();
        let kc = solve_kmin(&coarse, &log_moments(&l, &coarse).unwrap()).unwrap();
        let kf = solve_kmin(&fine, &log_moments(&l, &fine).unwrap()).unwrap();
        prop_assert!(kc <= kf + 1e-12);
    }

    #[test]
    fn breakdown_dominates_empirical(emp in 0.0f64..5.0, kl in 0.0f64..1e4, k in 0.0f64..3.0, m in 1usize..100_000) {
        let b = PacLossBreakdown::assemble(emp, kl, k, m, &PacBayesConfig::default(), None);
        prop_assert!(b.total >= b.empirical);
        prop_assert!(b.gamma >= 0.5 && b.gamma <= 10.0);
    }

    #[test]
    fn argmin_gamma_beats_neighbours(kl in 0.0f64..1e3, k in 1e-3f64..3.0, m in 10usize..100_000, delta in 0.01f64..0.5) {
        let g = optimal_gamma(kl, k, m, delta, 0.5, 10.0, GammaMode::Argmin);
        let a = (1.0 / delta).ln() + kl;
        let f = |x: f64| a / (x * m as f64) + x * k;
        for x in [g * 0.99, g * 1.01] {
            if (0.5..=10.0).contains(&x) {
                prop_assert!(f(g) <= f(x) + 1e-15);
            }
        }
    }

    #[test]
    fn eta_positive_and_increasing_in_k(a in 0.5f64..8.0, b in 0.0f64..2.0, d in 50usize..100_000, m in 100usize..100_000, k in 1usize..20) {
        let p = CertificateParams {
            weight_scale: 1.0,
            variance_budget: 1.0,
            a,
            b_up: b,
            k,
            m,
            d,
            gamma_lo: 0.5,
            gamma_hi: 10.0,
            epsilon: 0.1,
        };
        let (l1, l2) = lipschitz_constants(&p);
        let e = correction_eta(&p, l1 + l2).unwrap();
        prop_assert!(e > 0.0);
        let q = CertificateParams { k: k + 1, ..p };
        prop_assert!(correction_eta(&q, l1 + l2).unwrap() > e);
        prop_assert_eq!(lipschitz_constants(&p), (l1, l2));
    }

    #[test]
    fn flatten_round_trips(widths in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
        let model = MlpModel::new(&widths).unwrap();
        let flat = model.init_params(seed);
        let back = model.flatten(&model.unflatten(&flat).unwrap()).unwrap();
        prop_assert_eq!(back, flat);
        let mut covered = vec![0u8; model.dim()];
        for g in model.groups() {
            for i in g.range() {
                covered[i] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn smoothed_ce_exceeds_target_entropy(logits in prop::collection::vec(-6.0f64..6.0, 12), s in 0.0f64..0.9) {
        let c = 4;
        let labels = vec![0, 1, 2];
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, c, logits).unwrap());
        let loss = ce_loss(x, &labels, s).unwrap().item().unwrap();
        let hi = 1.0 - s + s / c as f64;
        let lo = s / c as f64;
        let entropy = -hi * hi.ln() - if lo > 0.0 { (c - 1) as f64 * lo * lo.ln() } else { 0.0 };
        prop_assert!(loss >= 0.0);
        prop_assert!(loss >= entropy - 1e-12);
    }

    #[test]
    fn stratified_split_counts(seed in any::<u64>(), m in 30usize..300, classes in 2usize..5) {
        let ds = gen_blobs(seed, m, classes, 0.3, 0.2).unwrap();
        let f = [0.5, 0.3, 0.2];
        let (a, b, c) = split_stratified(&ds, f, seed).unwrap();
        let total = ds.class_counts();
        for (part, frac) in [(a, f[0]), (b, f[1]), (c, f[2])] {
            for (got, &all) in part.class_counts().iter().zip(&total) {
                prop_assert!((*got as f64 - frac * all as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn blobs_are_deterministic(seed in any::<u64>()) {
        let a = gen_blobs(seed, 40, 3, 0.3, 0.1).unwrap();
        let b = gen_blobs(seed, 40, 3, 0.3, 0.1).unwrap();
        prop_assert_eq!(a.features().data(), b.features().data());
        prop_assert_eq!(a.labels(), b.labels());
    }
}

/// Small run used by the training invariants below.
fn tiny_run(kind: PriorKind) -> trainer::TrainedRun {
    let text = r#"
        [model]
        hidden = [8]
        [data]
        samples = 300
        [pacbayes]
        seed = 3
        stage1_epochs = 30
        warmup_epochs = 10
        stage2_max_epochs = 100
        batch_size = 25
        lambda_queries = 4
        prior_samples = 3
        eval_samples = 5
    "#;
    let mut cfg = RunConfig::from_toml(text, "tiny").unwrap();
    cfg.prior = kind;
    let splits = cfg.load_splits().unwrap();
    let model = cfg.model_for(&splits.train).unwrap();
    let curve = trainer::estimate_curve(&cfg.pacbayes, kind, &model, &splits.train).unwrap();
    trainer::run_pipeline(&cfg, &splits, curve).unwrap()
}

#[test]
fn training_invariants() {
    for kind in [PriorKind::Scalar, PriorKind::Layerwise] {
        let run = tiny_run(kind);
        let cfg = &run.state.cfg;
        for l in run.state.prior.variances() {
            assert!(l >= cfg.lambda_lo * (1.0 - 1e-12) && l <= cfg.lambda_hi * (1.0 + 1e-12), "{l}");
        }
        let rows = &run.state.metrics;
        for r in rows.iter().filter(|r| r.stage == 1) {
            let parts = r.train_loss + r.complexity.unwrap() + r.moment.unwrap();
            assert!((r.pac_total.unwrap() - parts).abs() <= 1e-12 * parts.abs().max(1.0), "{r:?}");
        }
        let lrs: Vec<f64> = rows.iter().filter(|r| r.stage == 2).map(|r| r.lr).collect();
        assert!(!lrs.is_empty());
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(run.stage1.posterior.log_var, run.state.post.log_var);
        assert_eq!(run.stage1.prior.log_var, run.state.prior.log_var);
    }
}

#[test]
fn certificate_json_round_trips_bitwise() {
    let run = tiny_run(PriorKind::Layerwise);
    let text = run.certificate.to_json().unwrap();
    let back = pacbayes::certify::BoundCertificate::from_json(&text, "t").unwrap();
    assert_eq!(back, run.certificate);
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn shipped_configs_match_defaults() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = RunConfig::load(&root.join("blobs.toml")).unwrap();
    let expected = RunConfig { output_dir: cfg.output_dir.clone(), ..RunConfig::default() };
    assert_eq!(cfg, expected);
    let text = std::fs::read_to_string(root.join("grid.toml")).unwrap();
    assert_eq!(trainer::BaselineGrid::from_toml(&text, "grid").unwrap(), trainer::BaselineGrid::default());
}
