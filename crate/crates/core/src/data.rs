//! Datasets: synthetic Gaussian mixtures, label-shift resampling and CSV I/O.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng;
use crate::simplex::LabelDistribution;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, dim: usize) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= num_classes {
                return Err(Error::domain(format!(
                    "example {i} has label {} but there are {num_classes} classes",
                    ex.label
                )));
            }
            if ex.features.len() != dim {
                return Err(Error::shape(format!("example {i} has {} features, expected {dim}", ex.features.len())));
            }
            if ex.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("example {i} has non-finite features")));
            }
        }
        Ok(Self { examples, num_classes, dim })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Empirical label marginal. Fails on an empty dataset.
    pub fn label_marginal(&self) -> Result<LabelDistribution> {
        if self.examples.is_empty() || self.num_classes == 0 {
            return Err(Error::domain("empty dataset has no label marginal"));
        }
        let n = self.examples.len() as f64;
        LabelDistribution::new(self.class_counts().into_iter().map(|c| c as f64 / n).collect())
    }

    /// Errors unless every class has at least one example.
    pub fn check_covers_all_classes(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("dataset has no classes"));
        }
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(k) => Err(Error::config(format!("class {k} has no examples"))),
            None => Ok(()),
        }
    }

    /// Indices of examples grouped by class.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, ex) in self.examples.iter().enumerate() {
            pools[ex.label].push(i);
        }
        pools
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Norm of every class mean.
    pub separation: f64,
    /// Per-class isotropic noise standard deviation (class difficulty).
    pub noise: Vec<f64>,
    pub marginal: LabelDistribution,
    pub n: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Balanced classes with identical noise.
    pub fn uniform(num_classes: usize, dim: usize, separation: f64, noise: f64, n: usize, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            separation,
            noise: vec![noise; num_classes],
            marginal: LabelDistribution::uniform(num_classes),
            n,
            seed,
        }
    }

    /// Ten-class desk benchmark: noise grows with class index and the noisier
    /// classes are also the rarer ones.
    pub fn heterogeneous_ten(n: usize, seed: u64) -> Self {
        let noise = vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.3, 1.6, 1.9, 2.2];
        let weights = [0.16, 0.14, 0.14, 0.12, 0.12, 0.10, 0.08, 0.06, 0.05, 0.03];
        let marginal = LabelDistribution::new(weights.to_vec()).expect("weights sum to one");
        Self { num_classes: 10, dim: 10, separation: 3.0, noise, marginal, n, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::config("need at least one class and one feature"));
        }
        if self.noise.len() != self.num_classes || self.marginal.len() != self.num_classes {
            return Err(Error::config("noise and marginal must have one entry per class"));
        }
        if self.noise.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::config("noise levels must be finite and non-negative"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config("separation must be finite and non-negative"));
        }
        if self.n < self.num_classes {
            return Err(Error::config(format!("n = {} is smaller than L = {}", self.n, self.num_classes)));
        }
        Ok(())
    }

    /// Class means. These depend only on `(L, d, separation)`, so datasets
    /// drawn with different seeds share their class-conditional distributions.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let (l, d) = (self.num_classes, self.dim);
        if d >= l {
            return (0..l).map(|k| (0..d).map(|j| if j == k { self.separation } else { 0.0 }).collect()).collect();
        }
        let mut rng = rng::stream(((l as u64) << 32) | d as u64, "class-means", 0);
        (0..l)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| self.separation * x / norm).collect()
            })
            .collect()
    }
}

/// Class-conditional Gaussians with labels drawn from `cfg.marginal`.
pub fn gaussian_mixture_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let means = cfg.class_means();
    let mut label_rng = rng::stream(cfg.seed, "synth-labels", 0);
    let mut feature_rng = rng::stream(cfg.seed, "synth-features", 0);
    let sampler =
        WeightedIndex::new(cfg.marginal.probs()).map_err(|e| Error::config(format!("bad label marginal: {e}")))?;
    let examples = (0..cfg.n)
        .map(|_| {
            let y = sampler.sample(&mut label_rng);
            let features = means[y]
                .iter()
                .map(|m| {
                    let z: f64 = feature_rng.sample(StandardNormal);
                    m + cfg.noise[y] * z
                })
                .collect();
            Example::new(features, y)
        })
        .collect();
    Dataset::new(examples, cfg.num_classes, cfg.dim)
}

/// Draws `n` labels from `target` and, for each, a feature vector uniformly
/// (with replacement) from that class's examples in `data`.
pub fn resample_label_distribution(data: &Dataset, target: &LabelDistribution, n: usize, seed: u64) -> Result<Dataset> {
    if target.len() != data.num_classes() {
        return Err(Error::shape(format!("target has {} classes, dataset {}", target.len(), data.num_classes())));
    }
    let pools = data.class_pools();
    for (k, (&t, pool)) in target.probs().iter().zip(&pools).enumerate() {
        if t > 0.0 && pool.is_empty() {
            return Err(Error::domain(format!("target puts mass on class {k} which has no examples")));
        }
    }
    let sampler =
        WeightedIndex::new(target.probs()).map_err(|e| Error::domain(format!("bad target distribution: {e}")))?;
    let mut rng = rng::stream(seed, "resample", 0);
    let examples = (0..n)
        .map(|_| {
            let y = sampler.sample(&mut rng);
            let pool = &pools[y];
            data.examples()[pool[rng.gen_range(0..pool.len())]].clone()
        })
        .collect();
    Dataset::new(examples, data.num_classes(), data.dim())
}

/// Writes `label,f0,...,f{d-1}` rows.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for ex in data.examples() {
        let mut row = vec![ex.label.to_string()];
        row.extend(ex.features.iter().map(|x| format!("{x:?}")));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

/// Reads a dataset written by [`save_csv`]. The number of classes is
/// `max label + 1` (zero for a header-only file).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_csv(reader: impl std::io::Read) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = r.headers().map_err(|e| csv_io(Path::new(""), e))?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::Parse { line: 1, message: "first column must be `label`".into() });
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse { line: 1, message: format!("expected column `f{j}`, found `{name}`") });
        }
    }
    let dim = header.len() - 1;
    let mut examples = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_io(Path::new(""), e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != dim + 1 {
            return Err(bad(format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let label: usize = record[0].parse().map_err(|_| bad(format!("bad label `{}`", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad feature `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        examples.push(Example::new(features, label));
    }
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    Dataset::new(examples, num_classes, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::uniform(3, 2, 3.0, 0.5, 200, 9);
        let a = gaussian_mixture_dataset(&cfg).unwrap();
        assert_eq!(a, gaussian_mixture_dataset(&cfg).unwrap());
        let b = gaussian_mixture_dataset(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_marginal_is_recovered() {
        let cfg = SynthConfig::uniform(4, 3, 1.0, 1.0, 10_000, 1);
        let data = gaussian_mixture_dataset(&cfg).unwrap();
        let m = data.label_marginal().unwrap();
        for p in m.probs() {
            assert!((p - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn means_shared_across_seeds_and_low_dim() {
        let cfg = SynthConfig::uniform(5, 2, 3.0, 0.0, 50, 1);
        let means = cfg.class_means();
        assert_eq!(means, SynthConfig { seed: 99, ..cfg.clone() }.class_means());
        for m in &means {
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12);
        }
        // Zero noise: every example sits on its class mean.
        let data = gaussian_mixture_dataset(&cfg).unwrap();
        for ex in data.examples() {
            assert_eq!(ex.features, means[ex.label]);
        }
    }

    #[test]
    fn config_errors() {
        let mut cfg = SynthConfig::uniform(3, 2, 1.0, 1.0, 2, 0);
        assert!(matches!(gaussian_mixture_dataset(&cfg), Err(Error::Config(_))));
        cfg.n = 10;
        cfg.noise.pop();
        assert!(gaussian_mixture_dataset(&cfg).is_err());
    }

    #[test]
    fn resampling_examples() {
        let data = gaussian_mixture_dataset(&SynthConfig::uniform(3, 2, 2.0, 1.0, 300, 4)).unwrap();
        let point = LabelDistribution::point_mass(3, 0);
        let shifted = resample_label_distribution(&data, &point, 100, 1).unwrap();
        assert!(shifted.examples().iter().all(|e| e.label == 0));
        assert_eq!(shifted, resample_label_distribution(&data, &point, 100, 1).unwrap());
        // Missing class in the pool.
        let only01 = Dataset::new(data.examples().iter().filter(|e| e.label < 2).cloned().collect(), 3, 2).unwrap();
        let err = resample_label_distribution(&only01, &LabelDistribution::uniform(3), 10, 0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = gaussian_mixture_dataset(&SynthConfig::uniform(3, 4, 2.0, 1.0, 30, 2)).unwrap();
        save_csv(&data, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), data);

        let err = read_csv("label,f0,f1\n0,1.0,2.0\n1,abc,2.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = read_csv("label,f0\n0,1.0\n1,2.0,3.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");

        let empty = read_csv("label,f0,f1\n".as_bytes()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.num_classes(), 0);
        assert!(empty.check_covers_all_classes().is_err());
    }
}
