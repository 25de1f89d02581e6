//! Few-shot inference: feature generation, Gaussian prototypes, fusion,
//! nearest-prototype classification and episodic evaluation.
//!
//! Per episode:
//!
//! ```text
//! support ──► enc_a ──► A ─┐
//!                          ├─► dec_az mean ──► generated rows ──► p'
//! Z pool  ──► enc_z ──► Z ─┘                                       │
//! support ───────────────────────────────────────────► p ──► fuse(p, p') ──► classify queries
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::model::{DisGenModel, PriorTable};
use crate::optim::{AdamConfig, OptState};
use crate::params::ParamStore;
use crate::rng::{standard_normal, SeedStream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gaussian summary of one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassPrototype {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One prototype per episode class, indexed by episode label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrototypeSet {
    pub classes: Vec<ClassPrototype>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn means(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.classes.iter().map(|c| c.mean.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Per-class means and per-dimension sample variances (`n - 1`
/// denominator). Classes with one row get `fallback_var`; every variance is
/// floored at `floor`.
pub fn prototype_estimate(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    fallback_var: f64,
    floor: f64,
) -> Result<PrototypeSet> {
    if !(floor > 0.0) {
        return Err(Error::config(format!("variance floor must be positive, got {floor}")));
    }
    if x.rank() != 2 || x.outer() != labels.len() {
        return Err(Error::shape(
            "prototype_estimate",
            format!("{:?} rows for {} labels", x.shape(), labels.len()),
        ));
    }
    let d = x.last_dim();
    let mut rows = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::contract(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        rows[y].push(i);
    }
    let mut classes = Vec::with_capacity(n_classes);
    for (c, idx) in rows.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::contract(format!("class {c} has no samples")));
        }
        let k = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let var: Vec<f64> = if idx.len() >= 2 {
            (0..d)
                .map(|j| idx.iter().map(|&i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / (k - 1.0))
                .collect()
        } else {
            vec![fallback_var; d]
        };
        let var = var.into_iter().map(|v| v.max(floor)).collect();
        classes.push(ClassPrototype {
            mean,
            var,
            count: idx.len(),
        });
    }
    Ok(PrototypeSet { classes })
}

/// Precision-weighted product of two Gaussian estimates per dimension.
pub fn fuse_prototypes(p: &PrototypeSet, q: &PrototypeSet) -> Result<PrototypeSet> {
    if p.len() != q.len() || p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "cannot fuse {} classes of width {} with {} classes of width {}",
            p.len(),
            p.dim(),
            q.len(),
            q.dim()
        )));
    }
    let classes = p
        .classes
        .iter()
        .zip(&q.classes)
        .map(|(a, b)| {
            let mut mean = Vec::with_capacity(a.mean.len());
            let mut var = Vec::with_capacity(a.mean.len());
            for j in 0..a.mean.len() {
                let (pa, pb) = (1.0 / a.var[j], 1.0 / b.var[j]);
                let prec = pa + pb;
                mean.push((a.mean[j] * pa + b.mean[j] * pb) / prec);
                var.push(1.0 / prec);
            }
            ClassPrototype {
                mean,
                var,
                count: a.count + b.count,
            }
        })
        .collect();
    Ok(PrototypeSet { classes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Nearest prototype per query; ties go to the lowest class index.
pub fn classify_queries(protos: &PrototypeSet, queries: &Tensor, metric: Metric) -> Result<Vec<usize>> {
    if queries.rank() != 2 || queries.last_dim() != protos.dim() {
        return Err(Error::shape(
            "classify_queries",
            format!("queries {:?} vs prototypes of width {}", queries.shape(), protos.dim()),
        ));
    }
    if protos.is_empty() {
        return Err(Error::contract("no prototypes"));
    }
    Ok((0..queries.outer())
        .map(|i| {
            let q = queries.row(i);
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for (c, p) in protos.classes.iter().enumerate() {
                let score = match metric {
                    Metric::Euclidean => q.iter().zip(&p.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                    Metric::Cosine => -cosine(q, &p.mean),
                };
                if score < best_score {
                    best_score = score;
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Where generated samples take their `Z` from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZPool {
    /// Support and query rows of the episode.
    Transductive,
    SupportOnly,
    /// Rows of the base classes.
    BasePool,
}

/// A row feeding the `Z` pool, tagged by origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRow {
    Support(usize),
    Query(usize),
    Base(usize),
}

/// The pool rows for `mode`; positions index the episode's support and
/// query lists, or the base dataset.
pub fn z_pool_rows(mode: ZPool, ep: &Episode, base_rows: usize) -> Vec<PoolRow> {
    let support = (0..ep.support_rows.len()).map(PoolRow::Support);
    match mode {
        ZPool::Transductive => support.chain((0..ep.query_rows.len()).map(PoolRow::Query)).collect(),
        ZPool::SupportOnly => support.collect(),
        ZPool::BasePool => (0..base_rows).map(PoolRow::Base).collect(),
    }
}

/// Generated features with episode labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

fn gaussian_draw(mu: &[f64], log_var: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .map(|(m, l)| m + (0.5 * l).exp() * standard_normal(rng))
        .collect()
}

/// `n_gen` rows per class. `A` is drawn from `enc_a` on a random support row
/// of the class, or from `N(a_c, sigma_A^2 I)` when `prior` is given (rows
/// indexed by episode label); `Z` is drawn from `enc_z` on a random pool row.
pub fn generate_augmented(
    model: &DisGenModel,
    support_x: &Tensor,
    support_labels: &[usize],
    way: usize,
    pool: &Tensor,
    n_gen: usize,
    prior: Option<&PriorTable>,
    rng: &mut impl Rng,
) -> Result<Generated> {
    if n_gen == 0 {
        return Err(Error::config("n_gen must be >= 1"));
    }
    if pool.outer() == 0 {
        return Err(Error::contract("empty Z pool"));
    }
    if let Some(p) = prior {
        if p.classes() < way {
            return Err(Error::contract(format!(
                "prior table has {} rows for {way} classes",
                p.classes()
            )));
        }
    }
    let mut by_class = vec![Vec::new(); way];
    for (i, &y) in support_labels.iter().enumerate() {
        if y >= way {
            return Err(Error::contract(format!(
                "support label {y} out of range for {way} classes"
            )));
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        if prior.is_none() {
            return Err(Error::contract(format!("class {c} has no support rows")));
        }
    }
    let sup = model.encode_tensors(support_x)?;
    let pz = model.encode_tensors(pool)?;
    let (d_a, d_z) = (model.dims.d_a, model.dims.d_z);
    let total = way * n_gen;
    let mut a = Vec::with_capacity(total * d_a);
    let mut z = Vec::with_capacity(total * d_z);
    let mut labels = Vec::with_capacity(total);
    for (c, rows) in by_class.iter().enumerate() {
        for _ in 0..n_gen {
            match prior {
                Some(p) => {
                    let mu = p.attributes().row(c);
                    a.extend(mu.iter().map(|m| m + p.sigma() * standard_normal(rng)));
                }
                None => {
                    let s = rows[rng.gen_range(0..rows.len())];
                    a.extend(gaussian_draw(sup.a_mu.row(s), sup.a_log_var.row(s), rng));
                }
            }
            let r = rng.gen_range(0..pool.outer());
            z.extend(gaussian_draw(pz.z_mu.row(r), pz.z_log_var.row(r), rng));
            labels.push(c);
        }
    }
    let x = model.decode_az_tensors(&Tensor::matrix(total, d_a, a)?, &Tensor::matrix(total, d_z, z)?)?;
    Ok(Generated { x, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub n_gen: usize,
    pub z_pool: ZPool,
    pub metric: Metric,
    pub variance_floor: f64,
    /// Variance used for single-row classes; `None` takes the mean
    /// within-class variance of the base data (1.0 without base data).
    pub fallback_var: Option<f64>,
    /// Draw `A` from the class attribute prior instead of the support rows.
    pub use_prior: bool,
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
            n_gen: 50,
            z_pool: ZPool::Transductive,
            metric: Metric::Euclidean,
            variance_floor: 1e-4,
            fallback_var: None,
            use_prior: false,
            baseline: false,
        }
    }
}

/// Per-episode outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub accuracy: f64,
    /// Support-only accuracy on the same episode.
    pub support_accuracy: f64,
    /// Mean cosine of the prototypes used to the true class centroids.
    pub cosine: f64,
    pub support_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"augmented"` or `"baseline"`.
    pub mode: String,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// `1.96 * std / sqrt(episodes)` with the population standard deviation.
    pub ci95: f64,
    pub std: f64,
    pub mean_support_accuracy: f64,
    pub mean_cosine: f64,
    pub mean_support_cosine: f64,
    pub per_episode: Vec<EpisodeResult>,
    pub seed: u64,
    pub config: EvalConfig,
}

/// Mean and population standard deviation, summed in sorted order so the
/// result does not depend on episode scheduling.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn ci95(std: f64, episodes: usize) -> f64 {
    1.96 * std / (episodes as f64).sqrt()
}

fn mean_cosine(protos: &PrototypeSet, centroids: &Tensor, classes: &[usize]) -> f64 {
    let k = protos.len() as f64;
    protos
        .classes
        .iter()
        .zip(classes)
        .map(|(p, &c)| cosine(&p.mean, centroids.row(c)))
        .sum::<f64>()
        / k
}

/// Rayon pool capped by `DGIB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DGIB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("DGIB_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::config("DGIB_THREADS must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Runs `cfg.episodes` episodes on `novel`. `base` feeds the base Z pool and
/// the single-row variance fallback; `priors` holds one attribute row per
/// novel class.
pub fn eval_episodes(
    model: &DisGenModel,
    novel: &Dataset,
    base: Option<&Dataset>,
    priors: Option<&PriorTable>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::config("eval.episodes must be >= 1"));
    }
    if novel.d_x() != model.dims.d_x {
        return Err(Error::config(format!(
            "dataset has d_X = {}, model expects {}",
            novel.d_x(),
            model.dims.d_x
        )));
    }
    if !cfg.baseline && cfg.use_prior {
        let p = priors.ok_or_else(|| Error::config("eval.use_prior needs class attributes"))?;
        if p.classes() != novel.classes() || p.dim() != model.dims.d_a {
            return Err(Error::config(format!(
                "prior table is [{}, {}], need [{}, {}]",
                p.classes(),
                p.dim(),
                novel.classes(),
                model.dims.d_a
            )));
        }
    }
    if cfg.z_pool == ZPool::BasePool && !cfg.baseline && base.map_or(true, Dataset::is_empty) {
        return Err(Error::contract("base-pool mode needs base rows"));
    }
    let fallback = match cfg.fallback_var {
        Some(v) => v,
        None => base.map_or(1.0, Dataset::mean_class_variance),
    };
    let centroids = novel.class_centroids();
    let sampler = EpisodeSampler::new(novel);
    let stream = SeedStream::new(seed);
    // Fail early on episode-shape problems with a deterministic message.
    sampler.sample(cfg.way, cfg.shot, cfg.queries, &mut stream.indexed("episode", 0).rng())?;

    let run = |i: usize| -> Result<EpisodeResult> {
        let mut rng = stream.indexed("episode", i as u64).rng();
        let ep = sampler.sample(cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        let sx = ep.support_x(novel)?;
        let qx = ep.query_x(novel)?;
        let p = prototype_estimate(&sx, &ep.support_labels, cfg.way, fallback, cfg.variance_floor)?;
        let support_pred = classify_queries(&p, &qx, cfg.metric)?;
        let support_accuracy = accuracy(&support_pred, &ep.query_labels);
        let support_cosine = mean_cosine(&p, &centroids, &ep.classes);
        if cfg.baseline {
            return Ok(EpisodeResult {
                accuracy: support_accuracy,
                support_accuracy,
                cosine: support_cosine,
                support_cosine,
            });
        }
        let pool_rows = z_pool_rows(cfg.z_pool, &ep, base.map_or(0, Dataset::len));
        let pool_data: Vec<Vec<f64>> = pool_rows
            .iter()
            .map(|r| match *r {
                PoolRow::Support(j) => sx.row(j).to_vec(),
                PoolRow::Query(j) => qx.row(j).to_vec(),
                PoolRow::Base(j) => base.expect("checked above").features.row(j).to_vec(),
            })
            .collect();
        let pool = Tensor::from_rows(&pool_data)?;
        let ep_prior = if cfg.use_prior {
            let p = priors.expect("checked above");
            Some(PriorTable::new(p.attributes().select_rows(&ep.classes)?, p.sigma())?)
        } else {
            None
        };
        let gen = generate_augmented(
            model,
            &sx,
            &ep.support_labels,
            cfg.way,
            &pool,
            cfg.n_gen,
            ep_prior.as_ref(),
            &mut rng,
        )?;
        let pg = prototype_estimate(&gen.x, &gen.labels, cfg.way, fallback, cfg.variance_floor)?;
        let fused = fuse_prototypes(&p, &pg)?;
        let pred = classify_queries(&fused, &qx, cfg.metric)?;
        Ok(EpisodeResult {
            accuracy: accuracy(&pred, &ep.query_labels),
            support_accuracy,
            cosine: mean_cosine(&fused, &centroids, &ep.classes),
            support_cosine,
        })
    };
    let pool = thread_pool()?;
    let per_episode: Vec<EpisodeResult> =
        pool.install(|| (0..cfg.episodes).into_par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let acc: Vec<f64> = per_episode.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std) = mean_std(&acc);
    let col = |f: fn(&EpisodeResult) -> f64| mean_std(&per_episode.iter().map(f).collect::<Vec<_>>()).0;
    Ok(EvalReport {
        mode: if cfg.baseline { "baseline" } else { "augmented" }.into(),
        way: cfg.way,
        shot: cfg.shot,
        queries: cfg.queries,
        episodes: cfg.episodes,
        mean_accuracy,
        ci95: ci95(std, cfg.episodes),
        std,
        mean_support_accuracy: col(|r| r.support_accuracy),
        mean_cosine: col(|r| r.cosine),
        mean_support_cosine: col(|r| r.support_cosine),
        per_episode,
        seed,
        config: cfg.clone(),
    })
}

/// Per-episode table: `episode,accuracy,support_accuracy,cosine,support_cosine`.
/// Values use the shortest representation that parses back to the same `f64`.
pub fn episodes_csv(report: &EvalReport) -> String {
    let mut s = String::from("episode,accuracy,support_accuracy,cosine,support_cosine\n");
    for (i, r) in report.per_episode.iter().enumerate() {
        s.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?}\n",
            r.accuracy, r.support_accuracy, r.cosine, r.support_cosine
        ));
    }
    s
}

/// Multinomial logistic regression on standardized inputs, full batch.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    store: ParamStore,
}

impl LinearProbe {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, steps: usize, seed: u64) -> Result<Self> {
        let (n, d) = (x.outer(), x.last_dim());
        if n == 0 || labels.len() != n {
            return Err(Error::contract("probe needs matching nonempty inputs"));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = (0..n).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).substream("probe").rng();
        let w: Vec<f64> = (0..d * classes).map(|_| 0.01 * standard_normal(&mut rng)).collect();
        let wid = store.insert("weight", Tensor::matrix(d, classes, w)?);
        let bid = store.insert("bias", Tensor::zeros(vec![classes]));
        let mut probe = Self { mean, scale, store };
        let xs = probe.standardize(x)?;
        let ids = [wid, bid];
        let mut opt = OptState::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &probe.store,
            &ids,
        );
        for _ in 0..steps {
            let mut tape = Tape::new();
            let bound = probe.store.bind_all(&mut tape);
            let xv = tape.constant(xs.clone());
            let h = tape.matmul(xv, bound.var(wid))?;
            let logits = tape.add(h, bound.var(bid))?;
            let xent = tape.softmax_cross_entropy(logits, labels)?;
            let loss = tape.mean(xent)?;
            let grads = tape.backward(loss)?;
            opt.step(&mut probe.store, &bound.grads(&grads, &ids))?;
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.last_dim() != d {
            return Err(Error::shape("probe", format!("input width {} vs {d}", x.last_dim())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) * self.scale[k % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let xs = self.standardize(x)?;
        let w = self.store.get(crate::params::ParamId(0));
        let b = self.store.get(crate::params::ParamId(1));
        let c = b.numel();
        Ok((0..xs.outer())
            .map(|i| {
                let row = xs.row(i);
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..c {
                    let s = b.data()[k]
                        + row
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * w.data()[j * c + k])
                            .sum::<f64>();
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect())
    }
}

/// Held-out accuracy of a linear probe from `train` to `test`.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let probe = LinearProbe::fit(train_x, train_y, classes, 300, seed)?;
    Ok(accuracy(&probe.predict(test_x)?, test_y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub acc_from_a: f64,
    pub acc_from_z: f64,
    pub chance: f64,
    /// Mean cosine of fused prototypes to the class centroids; present only
    /// for datasets with ground-truth factors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_proto_cosine: Option<f64>,
}

/// Linear probes on encoder means (a quarter of each class held out), plus
/// prototype cosines from a short episodic run when truth factors exist.
pub fn probe_disentanglement(model: &DisGenModel, ds: &Dataset, seed: u64) -> Result<ProbeReport> {
    let per_class = ds.rows_by_class().iter().map(Vec::len).min().unwrap_or(0) / 4;
    if per_class == 0 {
        return Err(Error::contract("probe needs at least 4 rows per class"));
    }
    let (train, test) = crate::data::holdout_split(ds, per_class, seed)?;
    let etr = model.encode_tensors(&train.features)?;
    let ete = model.encode_tensors(&test.features)?;
    let c = ds.classes();
    let acc_from_a = probe_accuracy(&etr.a_mu, &train.labels, &ete.a_mu, &test.labels, c, seed)?;
    let acc_from_z = probe_accuracy(&etr.z_mu, &train.labels, &ete.z_mu, &test.labels, c, seed)?;
    let (proto_cosine, support_proto_cosine) = if ds.truth_a.is_some() || ds.truth_z.is_some() {
        let way = c.min(5);
        let cfg = EvalConfig {
            way,
            queries: 1,
            episodes: 100,
            ..EvalConfig::default()
        };
        let r = eval_episodes(model, ds, None, None, &cfg, seed)?;
        (Some(r.mean_cosine), Some(r.mean_support_cosine))
    } else {
        (None, None)
    };
    Ok(ProbeReport {
        acc_from_a,
        acc_from_z,
        chance: 1.0 / c as f64,
        proto_cosine,
        support_proto_cosine,
    })
}
