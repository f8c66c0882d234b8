//! Seeded synthetic data.
//!
//! Real data is a `K`-class Gaussian mixture split into train / query /
//! gallery. Generated data imitates what a generator trained on random
//! mini-batches produces: every sample is a convex mix of a few real
//! training samples drawn from a small set of distinct classes, plus a
//! little noise. It therefore leans towards a handful of classes rather
//! than being a uniform blend of all of them.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::net::{join_floats, parse_floats};

const DATASET_MAGIC: &str = "mprl-dataset";
const DATASET_VERSION: u32 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Real sample with its 0-based class.
    Real(usize),
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub origin: Origin,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn class(&self) -> Option<usize> {
        match self.origin {
            Origin::Real(c) => Some(c),
            Origin::Generated => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: usize,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Checks the id, dimension and class invariants.
    pub fn new(classes: usize, feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if classes == 0 || feature_dim == 0 {
            return Err(Error::dim(
                "dataset needs at least one class and one feature",
            ));
        }
        let mut ids = std::collections::HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::dim(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if let Origin::Real(c) = s.origin {
                if c >= classes {
                    return Err(Error::InvalidClass { class: c, classes });
                }
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidValue(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Dataset {
            classes,
            feature_dim,
            samples,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// First `n` samples, keeping ids and splits.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            classes: self.classes,
            feature_dim: self.feature_dim,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let generated = self
            .samples
            .iter()
            .filter(|s| s.origin == Origin::Generated)
            .count();
        writeln!(
            out,
            "{DATASET_MAGIC} {DATASET_VERSION} classes={} dim={} samples={} train={} query={} gallery={} generated={}",
            self.classes,
            self.feature_dim,
            self.samples.len(),
            self.count(Split::Train),
            self.count(Split::Query),
            self.count(Split::Gallery),
            generated,
        )?;
        for s in &self.samples {
            let (origin, class) = match s.origin {
                Origin::Real(c) => ("real", c as i64),
                Origin::Generated => ("generated", -1),
            };
            writeln!(
                out,
                "{} {} {} {} {}",
                s.id,
                s.split,
                origin,
                class,
                join_floats(&s.features)
            )?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty dataset file"))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(DATASET_MAGIC) {
            return Err(Error::parse(1, "not a dataset file"));
        }
        if parts.next().and_then(|v| v.parse::<u32>().ok()) != Some(DATASET_VERSION) {
            return Err(Error::parse(1, "unsupported dataset version"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let token = parts
                .next()
                .ok_or_else(|| Error::parse(1, format!("missing header field {name}")))?;
            token
                .strip_prefix(name)
                .and_then(|t| t.strip_prefix('='))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| {
                    Error::parse(1, format!("bad header field {token:?}, expected {name}=N"))
                })
        };
        let classes = field("classes")?;
        let dim = field("dim")?;
        let n = field("samples")?;

        let mut samples = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut tokens = line.splitn(5, ' ');
            let mut tok = |what: &str| {
                tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_no, format!("missing {what}")))
            };
            let id = tok("id")?
                .parse::<u64>()
                .map_err(|e| Error::parse(line_no, format!("bad id: {e}")))?;
            let split = tok("split")?
                .parse::<Split>()
                .map_err(|e| Error::parse(line_no, e))?;
            let origin_tag = tok("origin")?;
            let class = tok("class")?
                .parse::<i64>()
                .map_err(|e| Error::parse(line_no, format!("bad class: {e}")))?;
            let origin = match (origin_tag, class) {
                ("real", c) if c >= 0 => Origin::Real(c as usize),
                ("generated", -1) => Origin::Generated,
                _ => {
                    return Err(Error::parse(
                        line_no,
                        format!("inconsistent origin {origin_tag:?} with class {class}"),
                    ))
                }
            };
            let features = parse_floats(tok("features")?, dim, line_no)?;
            samples.push(Sample {
                id,
                split,
                origin,
                features,
            });
        }
        if samples.len() != n {
            return Err(Error::parse(
                1,
                format!("header announces {n} samples, file holds {}", samples.len()),
            ));
        }
        Dataset::new(classes, dim, samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealDatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f64,
    /// Queries drawn per class from the non-training half.
    pub views: usize,
    /// Radius of the sphere the means are drawn on, in units of the
    /// required separation scaled by `K^(1/(dim-1))`.
    pub radius_scale: f64,
    pub seed: u64,
}

impl RealDatasetConfig {
    pub fn new(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        RealDatasetConfig {
            classes,
            per_class,
            dim,
            spread,
            views: 2,
            radius_scale: 1.5,
            seed,
        }
    }
}

/// Class means sit `radius_scale * 4 * spread` from the origin, scaled up
/// slightly with K. Per class, the first half of the samples train, then up
/// to `views` queries, the rest form the gallery.
pub fn make_real_dataset(cfg: &RealDatasetConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class < 4 || cfg.dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "need classes >= 2, per_class >= 4, dim >= 2 (got {}, {}, {})",
            cfg.classes, cfg.per_class, cfg.dim
        )));
    }
    if !cfg.spread.is_finite()
        || cfg.spread < 0.0
        || cfg.radius_scale.is_nan()
        || cfg.radius_scale <= 0.0
    {
        return Err(Error::InvalidConfig(
            "spread must be >= 0 and radius_scale > 0".into(),
        ));
    }
    if cfg.views == 0 {
        return Err(Error::InvalidConfig("views must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = place_means(cfg, &mut rng)?;

    let n_train = cfg.per_class / 2;
    let n_query = cfg.views.min(cfg.per_class - n_train - 1);
    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (class, mean) in means.iter().enumerate() {
        for i in 0..cfg.per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + cfg.spread * z
                })
                .collect();
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_query {
                Split::Query
            } else {
                Split::Gallery
            };
            samples.push(Sample {
                id: samples.len() as u64,
                split,
                origin: Origin::Real(class),
                features,
            });
        }
    }
    Dataset::new(cfg.classes, cfg.dim, samples)
}

fn place_means(cfg: &RealDatasetConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let separation = 4.0 * cfg.spread;
    let unit = if separation > 0.0 { separation } else { 1.0 };
    let radius = cfg.radius_scale * unit * (cfg.classes as f64).powf(1.0 / (cfg.dim - 1) as f64);
    let min_sq = separation * separation;

    if cfg.dim >= cfg.classes {
        // mutually orthogonal means, all pairs `radius * sqrt(2)` apart
        let frame = orthonormal_frame(cfg.classes, cfg.dim, rng);
        let gap_sq = 2.0 * radius * radius;
        if gap_sq < min_sq {
            return Err(Error::GenerationFailure(format!(
                "orthogonal means on radius {radius:.3} are {:.3} apart, below separation {separation}; \
                 raise radius_scale",
                gap_sq.sqrt()
            )));
        }
        return Ok(frame
            .into_iter()
            .map(|u| u.into_iter().map(|x| radius * x).collect())
            .collect());
    }

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    while means.len() < cfg.classes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate = random_direction(cfg.dim, rng)
                .into_iter()
                .map(|u| radius * u)
                .collect::<Vec<f64>>();
            let ok = means.iter().all(|m| {
                let d = sq_dist(m, &candidate);
                d >= min_sq && d > 0.0
            });
            if ok {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure(format!(
                "placed {} of {} class means with separation {separation} in {} dims \
                 (sphere radius {radius:.3}) after {MAX_PLACEMENT_ATTEMPTS} attempts; \
                 raise dim or radius_scale, or lower classes",
                means.len(),
                cfg.classes,
                cfg.dim
            )));
        }
    }
    Ok(means)
}

/// `count <= dim` random orthonormal vectors by Gram-Schmidt.
fn orthonormal_frame(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v = random_direction(dim, rng);
        for u in &frame {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= dot * a);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            frame.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    frame
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixWeights {
    /// Symmetric Dirichlet draw with the given concentration.
    Dirichlet(f64),
    Equal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedConfig {
    pub count: usize,
    pub mix_size: usize,
    /// Standard deviation of the additive noise; draws are truncated at 3 std.
    pub noise: f64,
    pub weights: MixWeights,
    pub seed: u64,
}

impl GeneratedConfig {
    pub fn new(count: usize, mix_size: usize, noise: f64, seed: u64) -> Self {
        GeneratedConfig {
            count,
            mix_size,
            noise,
            weights: MixWeights::Dirichlet(4.0),
            seed,
        }
    }
}

/// Where a generated sample came from. Diagnostics only: training code
/// receives the [`Dataset`], which carries no class for generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MixRecord {
    pub id: u64,
    pub source_ids: Vec<u64>,
    pub source_classes: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn make_generated_dataset(
    real: &Dataset,
    cfg: &GeneratedConfig,
) -> Result<(Dataset, Vec<MixRecord>)> {
    if cfg.count == 0 {
        return Err(Error::InvalidConfig(
            "generated count must be at least 1".into(),
        ));
    }
    if cfg.mix_size < 2 || cfg.mix_size > real.classes() {
        return Err(Error::InvalidConfig(format!(
            "mix_size must be in [2, {}], got {}",
            real.classes(),
            cfg.mix_size
        )));
    }
    if !cfg.noise.is_finite() || cfg.noise < 0.0 {
        return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
    }
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); real.classes()];
    for s in real.split(Split::Train) {
        if let Origin::Real(c) = s.origin {
            by_class[c].push(s);
        }
    }
    let populated: Vec<usize> = (0..real.classes())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if populated.is_empty() {
        return Err(Error::GenerationFailure(
            "real dataset has no training samples".into(),
        ));
    }
    if populated.len() < cfg.mix_size {
        return Err(Error::GenerationFailure(format!(
            "only {} classes have training samples, mix_size is {}",
            populated.len(),
            cfg.mix_size
        )));
    }
    let gamma = match cfg.weights {
        MixWeights::Dirichlet(c) => Some(
            Gamma::new(c, 1.0)
                .map_err(|e| Error::InvalidConfig(format!("bad Dirichlet concentration: {e}")))?,
        ),
        MixWeights::Equal => None,
    };

    let first_id = real.samples().iter().map(|s| s.id + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = real.feature_dim();
    let mut samples = Vec::with_capacity(cfg.count);
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = first_id + i as u64;
        let classes: Vec<usize> = index::sample(&mut rng, populated.len(), cfg.mix_size)
            .into_iter()
            .map(|j| populated[j])
            .collect();
        let sources: Vec<&Sample> = classes
            .iter()
            .map(|&c| by_class[c][rng.random_range(0..by_class[c].len())])
            .collect();
        let weights = match &gamma {
            Some(g) => {
                let raw: Vec<f64> = (0..cfg.mix_size).map(|_| g.sample(&mut rng)).collect();
                let total: f64 = raw.iter().sum();
                if total > 0.0 {
                    raw.iter().map(|w| w / total).collect()
                } else {
                    vec![1.0 / cfg.mix_size as f64; cfg.mix_size]
                }
            }
            None => vec![1.0 / cfg.mix_size as f64; cfg.mix_size],
        };
        let mut features = vec![0.0; dim];
        for (src, w) in sources.iter().zip(&weights) {
            for (f, v) in features.iter_mut().zip(&src.features) {
                *f += w * v;
            }
        }
        if cfg.noise > 0.0 {
            for f in &mut features {
                *f += cfg.noise * truncated_normal(&mut rng);
            }
        }
        samples.push(Sample {
            id,
            split: Split::Train,
            origin: Origin::Generated,
            features,
        });
        records.push(MixRecord {
            id,
            source_ids: sources.iter().map(|s| s.id).collect(),
            source_classes: classes,
            weights,
        });
    }
    Ok((Dataset::new(real.classes(), dim, samples)?, records))
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}
