//! Procedural multi-domain and long-tail classification corpora.
//!
//! Every class has a prototype on a sphere. A sample is the prototype plus
//! Gaussian jitter, pushed through its domain's transform (rotation of each
//! coordinate pair, isotropic scale, translation) plus observation noise.
//! Domains share the class geometry, so labels are stable while the input
//! distribution shifts.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::RngStreams;
use crate::tensor::Tensor;
use crate::textio::{fmt_f64, parse_f64};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Applied to every coordinate pair `(2i, 2i+1)`.
    pub rotation_angle: f64,
    pub scale: f64,
    pub translation: Vec<f64>,
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn identity(domain_id: usize, input_dim: usize) -> Self {
        Self {
            domain_id,
            rotation_angle: 0.0,
            scale: 1.0,
            translation: vec![0.0; input_dim],
            noise_std: 0.0,
        }
    }

    /// The stock shift for domain `d`: rotation `d·angle_step`, scale
    /// `1 + 0.1·d`, and a seeded random translation of norm `shift`.
    pub fn stock(domain_id: usize, input_dim: usize, angle_step: f64, shift: f64, noise_std: f64, seed: u64) -> Self {
        let mut rng = RngStreams::new(seed).child_indexed("domain", domain_id as u64).stream("translation");
        let dir: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Self {
            domain_id,
            rotation_angle: domain_id as f64 * angle_step,
            scale: 1.0 + 0.1 * domain_id as f64,
            translation: dir.iter().map(|v| v / norm * shift).collect(),
            noise_std,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("domain {} scale must be positive", self.domain_id)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("domain {} noise must be ≥ 0", self.domain_id)));
        }
        if self.translation.len() != input_dim {
            return Err(Error::Dimension {
                op: "domain translation",
                lhs: vec![input_dim],
                rhs: vec![self.translation.len()],
            });
        }
        Ok(())
    }

    /// Deterministic part of the transform: `scale·R(θ)·v + translation`.
    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        let (s, c) = self.rotation_angle.sin_cos();
        let mut out = v.to_vec();
        for i in (0..v.len().saturating_sub(1)).step_by(2) {
            let (a, b) = (v[i], v[i + 1]);
            out[i] = c * a - s * b;
            out[i + 1] = s * a + c * b;
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o = self.scale * *o + t;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub domains: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Class means before domain transforms. Empty after parsing a file.
    pub prototypes: Vec<Vec<f64>>,
}

/// Settings shared by both corpus kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub input_dim: usize,
    pub prototype_radius: f64,
    /// Minimum pairwise angle between prototypes, radians.
    pub min_separation: f64,
    pub jitter_std: f64,
}

impl GeometryConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            prototype_radius: 3.0,
            min_separation: PI / 6.0,
            jitter_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainConfig {
    pub classes: usize,
    pub per_cell: usize,
    pub geometry: GeometryConfig,
    pub domains: Vec<DomainSpec>,
}

impl MultiDomainConfig {
    /// Stock domains: `π/8` rotation steps, translation norm 1, noise 0.3.
    pub fn stock(classes: usize, domains: usize, per_cell: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            classes,
            per_cell,
            geometry: GeometryConfig::new(input_dim),
            domains: (0..domains)
                .map(|d| DomainSpec::stock(d, input_dim, PI / 8.0, 1.0, 0.3, seed))
                .collect(),
        }
    }
}

/// Prototypes on a sphere with pairwise angle ≥ `min_separation`, by
/// rejection sampling.
pub fn draw_prototypes(classes: usize, geo: &GeometryConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    const MAX_TRIES: usize = 10_000;
    let mut rng = RngStreams::new(seed).stream("datagen/prototypes");
    let cos_limit = geo.min_separation.cos();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while protos.len() < classes {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let v: Vec<f64> = (0..geo.input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
            let ok = protos.iter().all(|p| {
                let cos: f64 = p.iter().zip(&unit).map(|(a, b)| a * b).sum::<f64>() / geo.prototype_radius;
                cos <= cos_limit
            });
            if ok {
                protos.push(unit.iter().map(|x| x * geo.prototype_radius).collect());
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {classes} prototypes {:.3} rad apart in {} dimensions",
                geo.min_separation, geo.input_dim
            )));
        }
    }
    Ok(protos)
}

fn draw_sample<R: Rng + ?Sized>(proto: &[f64], jitter: f64, domain: &DomainSpec, rng: &mut R) -> Vec<f64> {
    let latent: Vec<f64> = proto
        .iter()
        .map(|p| p + jitter * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut x = domain.transform(&latent);
    for v in &mut x {
        *v += domain.noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    x
}

pub fn generate_multidomain(cfg: &MultiDomainConfig, seed: u64) -> Result<SyntheticDataset> {
    let geo = &cfg.geometry;
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.domains.is_empty() || cfg.per_cell == 0 || geo.input_dim == 0 {
        return Err(Error::Config("domains, per-cell count and input dim must be positive".into()));
    }
    for (d, spec) in cfg.domains.iter().enumerate() {
        spec.validate(geo.input_dim)?;
        if spec.domain_id != d {
            return Err(Error::Config(format!("domain spec {d} carries id {}", spec.domain_id)));
        }
    }
    let prototypes = draw_prototypes(cfg.classes, geo, seed)?;
    let root = RngStreams::new(seed);
    let mut samples = Vec::with_capacity(cfg.classes * cfg.domains.len() * cfg.per_cell);
    for spec in &cfg.domains {
        // one stream per domain, so editing one domain leaves the others untouched
        let mut rng = root.child_indexed("domain", spec.domain_id as u64).stream("samples");
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..cfg.per_cell {
                samples.push(Sample {
                    features: draw_sample(proto, geo.jitter_std, spec, &mut rng),
                    class,
                    domain: spec.domain_id,
                });
            }
        }
    }
    Ok(SyntheticDataset {
        samples,
        classes: cfg.classes,
        domains: cfg.domains.len(),
        input_dim: geo.input_dim,
        seed,
        prototypes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassGroup {
    Many,
    Medium,
    Few,
}

impl ClassGroup {
    /// Thirds of the class-index order; class 0 is the head.
    pub fn of(class: usize, classes: usize) -> Self {
        match 3 * class / classes.max(1) {
            0 => ClassGroup::Many,
            1 => ClassGroup::Medium,
            _ => ClassGroup::Few,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassGroup::Many => "many",
            ClassGroup::Medium => "medium",
            ClassGroup::Few => "few",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTailConfig {
    pub classes: usize,
    pub imbalance_ratio: f64,
    pub head_count: usize,
    pub geometry: GeometryConfig,
    pub noise_std: f64,
}

impl LongTailConfig {
    pub fn new(classes: usize, imbalance_ratio: f64, head_count: usize, input_dim: usize) -> Self {
        Self {
            classes,
            imbalance_ratio,
            head_count,
            geometry: GeometryConfig::new(input_dim),
            noise_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::Config(format!("imbalance ratio {} must be ≥ 1", self.imbalance_ratio)));
        }
        if (self.head_count as f64) < self.imbalance_ratio {
            return Err(Error::Config(format!(
                "head count {} below imbalance ratio {} leaves the tail empty",
                self.head_count, self.imbalance_ratio
            )));
        }
        Ok(())
    }

    /// `round(head · ratio^(−c/(C−1)))`, at least 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let last = (self.classes - 1) as f64;
        (0..self.classes)
            .map(|c| {
                let n = self.head_count as f64 * self.imbalance_ratio.powf(-(c as f64) / last);
                (n.round() as usize).max(1)
            })
            .collect()
    }

    fn domain(&self) -> DomainSpec {
        DomainSpec {
            noise_std: self.noise_std,
            ..DomainSpec::identity(0, self.geometry.input_dim)
        }
    }
}

/// Single-domain corpus with an exponential class-size profile.
pub fn generate_longtail(cfg: &LongTailConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let counts = cfg.class_counts();
    longtail_draw(cfg, &counts, "train", seed)
}

/// Class-balanced sample from the same prototypes as [`generate_longtail`].
pub fn generate_longtail_test(cfg: &LongTailConfig, per_class: usize, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    longtail_draw(cfg, &vec![per_class; cfg.classes], "test", seed)
}

fn longtail_draw(cfg: &LongTailConfig, counts: &[usize], split: &str, seed: u64) -> Result<SyntheticDataset> {
    let prototypes = draw_prototypes(cfg.classes, &cfg.geometry, seed)?;
    let domain = cfg.domain();
    let mut rng = RngStreams::new(seed).child("longtail").stream(split);
    let mut samples = Vec::new();
    for (class, (proto, &n)) in prototypes.iter().zip(counts).enumerate() {
        for _ in 0..n {
            samples.push(Sample {
                features: draw_sample(proto, cfg.geometry.jitter_std, &domain, &mut rng),
                class,
                domain: 0,
            });
        }
    }
    Ok(SyntheticDataset {
        samples,
        classes: cfg.classes,
        domains: 1,
        input_dim: cfg.geometry.input_dim,
        seed,
        prototypes,
    })
}

/// A materialised subset of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Indices into the source dataset.
    pub ids: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub input_dim: usize,
}

impl Split {
    pub fn from_ids(ds: &SyntheticDataset, ids: Vec<usize>) -> Self {
        let mut features = Vec::with_capacity(ids.len() * ds.input_dim);
        for &i in &ids {
            features.extend_from_slice(&ds.samples[i].features);
        }
        Self {
            labels: ids.iter().map(|&i| ds.samples[i].class).collect(),
            domains: ids.iter().map(|&i| ds.samples[i].domain).collect(),
            features,
            input_dim: ds.input_dim,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// All rows as one matrix.
    pub fn tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Validation("empty split".into()));
        }
        Tensor::matrix(self.len(), self.input_dim, self.features.clone())
    }

    /// Rows at `positions` (indices into this split) and their labels.
    pub fn batch(&self, positions: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if positions.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut data = Vec::with_capacity(positions.len() * self.input_dim);
        for &p in positions {
            data.extend_from_slice(self.row(p));
        }
        let labels = positions.iter().map(|&p| self.labels[p]).collect();
        Ok((Tensor::matrix(positions.len(), self.input_dim, data)?, labels))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub held_out: usize,
}

/// Test is the whole held-out domain; every other `(class, domain)` cell is
/// shuffled and its first `round(train_fraction·n)` samples go to train.
pub fn leave_one_domain_out_split(
    ds: &SyntheticDataset,
    held_out: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<DomainSplits> {
    if held_out >= ds.domains {
        return Err(Error::Range {
            what: "held-out domain",
            value: held_out,
            limit: ds.domains,
        });
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} must lie in [0, 1]")));
    }
    let test: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].domain == held_out).collect();
    let (train, val) = stratified_split(ds, |s| s.domain != held_out, train_fraction, seed);
    Ok(DomainSplits {
        train: Split::from_ids(ds, train),
        val: Split::from_ids(ds, val),
        test: Split::from_ids(ds, test),
        held_out,
    })
}

/// Train/val split stratified by `(class, domain)` over samples passing `keep`.
pub fn stratified_split(
    ds: &SyntheticDataset,
    keep: impl Fn(&Sample) -> bool,
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStreams::new(seed).stream("datagen/split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for domain in 0..ds.domains {
        for class in 0..ds.classes {
            let mut cell: Vec<usize> = (0..ds.samples.len())
                .filter(|&i| {
                    let s = &ds.samples[i];
                    s.class == class && s.domain == domain && keep(s)
                })
                .collect();
            if cell.is_empty() {
                continue;
            }
            cell.shuffle(&mut rng);
            let n_train = (train_fraction * cell.len() as f64).round() as usize;
            train.extend_from_slice(&cell[..n_train]);
            val.extend_from_slice(&cell[n_train..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

impl SyntheticDataset {
    /// `C D N input_dim seed` header, then `class domain f_1 … f_dim` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.classes,
            self.domains,
            self.samples.len(),
            self.input_dim,
            self.seed
        );
        for s in &self.samples {
            write!(out, "{} {}", s.class, s.domain).unwrap();
            for &v in &s.features {
                out.push(' ');
                out.push_str(&fmt_f64(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<u64> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?
            .split_whitespace()
            .map(|t| t.parse::<u64>().map_err(|e| Error::Parse(format!("header {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [classes, domains, n, dim, seed] = header[..] else {
            return Err(Error::Parse(format!("dataset header needs 5 fields, got {}", header.len())));
        };
        let (classes, domains, n, dim) = (classes as usize, domains as usize, n as usize, dim as usize);
        let mut samples = Vec::with_capacity(n);
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(' ');
            let mut int = |what: &str, limit: usize| -> Result<usize> {
                let tok = fields.next().ok_or_else(|| Error::Parse(format!("line {}: missing {what}", lineno + 2)))?;
                let v = tok
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {what} {tok:?}: {e}", lineno + 2)))?;
                if v >= limit {
                    return Err(Error::Parse(format!("line {}: {what} {v} out of range", lineno + 2)));
                }
                Ok(v)
            };
            let class = int("class", classes)?;
            let domain = int("domain", domains)?;
            let features = fields.map(parse_f64).collect::<Result<Vec<_>>>()?;
            if features.len() != dim {
                return Err(Error::Parse(format!(
                    "line {}: expected {dim} features, got {}",
                    lineno + 2,
                    features.len()
                )));
            }
            samples.push(Sample { features, class, domain });
        }
        if samples.len() != n {
            return Err(Error::Parse(format!("header promises {n} samples, found {}", samples.len())));
        }
        Ok(Self {
            samples,
            classes,
            domains,
            input_dim: dim,
            seed,
            prototypes: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }

    /// Every sample as one split, in dataset order.
    pub fn all(&self) -> Split {
        Split::from_ids(self, (0..self.samples.len()).collect())
    }
}
