//! Checks against oracles that do not share code with the crate: closed
//! forms, least squares, and fixtures with known answers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use disgenib::config::RunConfig;
use disgenib::data::{holdout_split, synth_make, Dataset, SynthConfig};
use disgenib::fsl::{
    accuracy, classify_queries, cosine, generate_augmented, probe_accuracy, prototype_estimate, LinearProbe, Metric,
};
use disgenib::model::DisGenModel;
use disgenib::objective::Mode;
use disgenib::train::Trainer;
use disgenib::Tensor;

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.outer(), t.last_dim(), t.data())
}

#[test]
fn linear_fixture_mixing_is_recovered_by_least_squares() {
    let cfg = SynthConfig {
        classes: 6,
        n_per_class: 20,
        d_x: 7,
        d_a: 2,
        d_z: 3,
        noise_sigma: 0.0,
        depth: 0,
        z_scale: 1.0,
    };
    let (ds, mixing) = synth_make(&cfg, 11).unwrap();
    let a = to_matrix(ds.truth_a.as_ref().unwrap());
    let z = to_matrix(ds.truth_z.as_ref().unwrap());
    let mut design = DMatrix::zeros(ds.len(), cfg.d_a + cfg.d_z);
    design.columns_mut(0, cfg.d_a).copy_from(&a);
    design.columns_mut(cfg.d_a, cfg.d_z).copy_from(&z);
    let x = to_matrix(&ds.features);
    let w = design.svd(true, true).solve(&x, 1e-12).unwrap();
    let want_a = to_matrix(&mixing.w_a);
    let want_z = to_matrix(&mixing.w_z);
    assert!((w.rows(0, cfg.d_a) - want_a).amax() < 1e-12);
    assert!((w.rows(cfg.d_a, cfg.d_z) - want_z).amax() < 1e-12);
}

#[test]
fn truth_factors_separate_label_from_style() {
    let cfg = SynthConfig::default();
    for seed in 0..5 {
        let (ds, _) = synth_make(&cfg, seed).unwrap();
        let (train, test) = holdout_split(&ds, 25, seed).unwrap();
        let acc = |f: fn(&Dataset) -> &Tensor| {
            probe_accuracy(f(&train), &train.labels, f(&test), &test.labels, cfg.classes, seed).unwrap()
        };
        let from_a = acc(|d| d.truth_a.as_ref().unwrap());
        let from_z = acc(|d| d.truth_z.as_ref().unwrap());
        let chance = 1.0 / cfg.classes as f64;
        assert_eq!(from_a, 1.0, "seed {seed}");
        assert!((from_z - chance).abs() <= 0.05, "seed {seed}: {from_z}");
    }
}

#[test]
fn prototype_mean_is_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, mu, sigma) = (400, [1.5, -2.0, 0.25], [0.5, 2.0, 1.0]);
    let mut rows = Vec::new();
    for _ in 0..n {
        for k in 0..3 {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            rows.push(mu[k] + sigma[k] * e);
        }
    }
    let x = Tensor::matrix(n, 3, rows).unwrap();
    let p = prototype_estimate(&x, &vec![0; n], 1, 1.0, 1e-6).unwrap();
    for k in 0..3 {
        let se = sigma[k] / (n as f64).sqrt();
        assert!((p.classes[0].mean[k] - mu[k]).abs() <= 3.0 * se, "dim {k}");
        let var = p.classes[0].var[k];
        assert!((var / (sigma[k] * sigma[k]) - 1.0).abs() < 0.2, "dim {k}: {var}");
    }
}

#[test]
fn true_centroids_classify_noiseless_fixture_perfectly() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        z_scale: 0.0,
        ..SynthConfig::default()
    };
    let (ds, _) = synth_make(&cfg, 9).unwrap();
    let protos = prototype_estimate(
        &ds.class_centroids(),
        &(0..cfg.classes).collect::<Vec<_>>(),
        cfg.classes,
        1.0,
        1e-6,
    )
    .unwrap();
    for metric in [Metric::Euclidean, Metric::Cosine] {
        let pred = classify_queries(&protos, &ds.features, metric).unwrap();
        assert_eq!(accuracy(&pred, &ds.labels), 1.0, "{metric:?}");
    }
}

#[test]
fn linear_probe_fits_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0], [0.0, -4.0]];
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        for (c, m) in centers.iter().enumerate() {
            x.push(m[0] + rng.gen_range(-1.0..1.0));
            x.push(m[1] + rng.gen_range(-1.0..1.0));
            y.push(c);
        }
    }
    let x = Tensor::matrix(y.len(), 2, x).unwrap();
    let probe = LinearProbe::fit(&x, &y, 4, 300, 0).unwrap();
    assert!(accuracy(&probe.predict(&x).unwrap(), &y) >= 0.99);
}

fn small_run(epochs: usize) -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    cfg.data.classes = 8;
    cfg.data.n_per_class = 60;
    cfg.data.d_x = 16;
    cfg.data.novel_classes = 3;
    cfg.model.hidden = 32;
    cfg.objective.alpha = 9.0;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 64;
    cfg.train.lr = 3e-3;
    let (ds, _) = synth_make(&cfg.data.synth(), 1).unwrap();
    let (base, _) = cfg.split(&ds).unwrap();
    (cfg, base)
}

fn trainer(cfg: &RunConfig, base: &Dataset) -> Trainer {
    let model = DisGenModel::init(cfg.model_dims(base), cfg.model.sigma_rec, 2).unwrap();
    Trainer::new(model, &cfg.objective, cfg.train.clone(), None, 2).unwrap()
}

#[test]
fn training_lowers_loss_and_raises_likelihood() {
    let (cfg, base) = small_run(20);
    let mut t = trainer(&cfg, &base);
    let before = t.evaluate(&base).unwrap();
    let first = t.run_epoch(&base).unwrap();
    let mut last = first.clone();
    for _ in 1..cfg.train.epochs {
        last = t.run_epoch(&base).unwrap();
    }
    let after = t.evaluate(&base).unwrap();
    assert!(
        last.loss.total < first.loss.total,
        "{} vs {}",
        last.loss.total,
        first.loss.total
    );
    assert!(
        after.recon_az < before.recon_az,
        "{} vs {}",
        after.recon_az,
        before.recon_az
    );
    assert_eq!(cfg.objective.mode, Mode::Disgenib);
}

/// For each class `c`, let `k` be the centroid nearest to `c`'s centroid.
/// Samples generated for `c` from one support row must on average be more
/// similar to `c`'s centroid than to `k`'s.
#[test]
fn generated_samples_sit_nearest_their_own_class() {
    let (cfg, base) = small_run(60);
    let mut t = trainer(&cfg, &base);
    for _ in 0..cfg.train.epochs {
        t.run_epoch(&base).unwrap();
    }
    let classes = base.classes();
    let centroids = base.class_centroids();
    let support: Vec<usize> = base.rows_by_class().iter().map(|r| r[0]).collect();
    let support_x = base.features.select_rows(&support).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gen = generate_augmented(
        &t.model,
        &support_x,
        &(0..classes).collect::<Vec<_>>(),
        classes,
        &base.features,
        200,
        None,
        &mut rng,
    )
    .unwrap();
    let nearest: Vec<usize> = (0..classes)
        .map(|c| {
            (0..classes)
                .filter(|&k| k != c)
                .max_by(|&a, &b| {
                    cosine(centroids.row(c), centroids.row(a)).total_cmp(&cosine(centroids.row(c), centroids.row(b)))
                })
                .unwrap()
        })
        .collect();
    let (mut own, mut other) = (0.0, 0.0);
    for (i, &c) in gen.labels.iter().enumerate() {
        own += cosine(gen.x.row(i), centroids.row(c));
        other += cosine(gen.x.row(i), centroids.row(nearest[c]));
    }
    let n = gen.labels.len() as f64;
    assert!(own / n > other / n, "own {} nearest other {}", own / n, other / n);
}
