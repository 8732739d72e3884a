//! Synthetic paired-modality data and missing-modality protocols.
//!
//! Each class owns a latent prototype per modality built from a component
//! shared by both modalities (weight `√ρ`) and a modality-private component
//! (weight `√(1−ρ)`). A raw input is a fixed random linear map of its
//! prototype plus Gaussian noise. Classes listed as exclusive to one modality
//! carry no class-specific signal in the other: there they reuse the
//! prototype of a designated confuser class.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{InputShape, Modality};
use crate::error::{Error, Result};
use crate::fusion::PresenceMask;
use crate::objectives::{LabelMode, LabelTarget};
use crate::rng::{gaussian, normal, permutation, stream};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub latent_dim: usize,
    pub raw_dim_m1: usize,
    pub raw_dim_m2: usize,
    pub patch_m1: usize,
    pub patch_m2: usize,
    pub noise_m1: f64,
    pub noise_m2: f64,
    /// Fraction of class signal shared across modalities, in `[0, 1]`.
    pub redundancy: f64,
    /// Classes whose signal appears only in modality 1.
    pub exclusive_m1: Vec<usize>,
    /// Classes whose signal appears only in modality 2.
    pub exclusive_m2: Vec<usize>,
    pub label_mode: LabelMode,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            train_size: 2000,
            val_size: 400,
            test_size: 400,
            latent_dim: 16,
            raw_dim_m1: 64,
            raw_dim_m2: 64,
            patch_m1: 8,
            patch_m2: 8,
            noise_m1: 0.5,
            noise_m2: 0.5,
            redundancy: 0.6,
            exclusive_m1: vec![6, 7],
            exclusive_m2: vec![8, 9],
            label_mode: LabelMode::Single,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        for (name, raw, patch) in [
            ("m1", self.raw_dim_m1, self.patch_m1),
            ("m2", self.raw_dim_m2, self.patch_m2),
        ] {
            if patch == 0 || raw == 0 || raw % patch != 0 {
                return fail(format!("{name}: raw dim {raw} must be a positive multiple of patch {patch}"));
            }
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return fail("redundancy must lie in [0, 1]".into());
        }
        if !(self.noise_m1 >= 0.0 && self.noise_m2 >= 0.0) {
            return fail("noise must be non-negative".into());
        }
        for &k in self.exclusive_m1.iter().chain(&self.exclusive_m2) {
            if k >= self.n_classes {
                return fail(format!("exclusive class {k} out of range"));
            }
        }
        if self.exclusive_m1.iter().any(|k| self.exclusive_m2.contains(k)) {
            return fail("exclusive class sets must be disjoint".into());
        }
        if self.non_exclusive().is_empty()
            && !(self.exclusive_m1.is_empty() && self.exclusive_m2.is_empty())
        {
            return fail("at least one class must be shared to act as a confuser".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            return fail("train and test splits must be nonempty".into());
        }
        Ok(())
    }

    pub fn input_shape(&self, m: Modality) -> InputShape {
        match m {
            Modality::M1 => InputShape {
                raw_dim: self.raw_dim_m1,
                patch_size: self.patch_m1,
            },
            Modality::M2 => InputShape {
                raw_dim: self.raw_dim_m2,
                patch_size: self.patch_m2,
            },
        }
    }

    fn non_exclusive(&self) -> Vec<usize> {
        (0..self.n_classes)
            .filter(|k| !self.exclusive_m1.contains(k) && !self.exclusive_m2.contains(k))
            .collect()
    }

    /// The class whose prototype an exclusive class borrows in the modality
    /// that does not carry its signal. Non-exclusive classes map to
    /// themselves.
    pub fn confuser(&self, k: usize) -> usize {
        let shared = self.non_exclusive();
        let pos = self
            .exclusive_m1
            .iter()
            .chain(&self.exclusive_m2)
            .position(|&e| e == k);
        match pos {
            Some(i) => shared[i % shared.len()],
            None => k,
        }
    }

    /// Whether class `k` carries its own signal in modality `m`.
    pub fn has_signal(&self, k: usize, m: Modality) -> bool {
        match m {
            Modality::M1 => !self.exclusive_m2.contains(&k),
            Modality::M2 => !self.exclusive_m1.contains(&k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// All zeros when modality 1 is absent.
    pub raw_m1: Vec<f64>,
    /// All zeros when modality 2 is absent.
    pub raw_m2: Vec<f64>,
    pub mask: PresenceMask,
    pub target: LabelTarget,
}

impl Sample {
    /// The raw input of `m`, or `None` when it is a placeholder.
    pub fn raw(&self, m: Modality) -> Option<&[f64]> {
        self.mask.present(m).then(|| self.raw_or_placeholder(m))
    }

    pub fn raw_or_placeholder(&self, m: Modality) -> &[f64] {
        match m {
            Modality::M1 => &self.raw_m1,
            Modality::M2 => &self.raw_m2,
        }
    }

    fn drop_modality(&mut self, m: Modality) {
        let raw = match m {
            Modality::M1 => {
                self.mask.m1_present = false;
                &mut self.raw_m1
            }
            Modality::M2 => {
                self.mask.m2_present = false;
                &mut self.raw_m2
            }
        };
        raw.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_complete: usize,
    pub n_m1_only: usize,
    pub n_m2_only: usize,
}

impl SplitStats {
    pub fn of(split: &[Sample]) -> Self {
        let mut s = Self::default();
        for x in split {
            match (x.mask.m1_present, x.mask.m2_present) {
                (true, true) => s.n_complete += 1,
                (true, false) => s.n_m1_only += 1,
                (false, true) => s.n_m2_only += 1,
                (false, false) => {}
            }
        }
        s
    }

    pub fn total(&self) -> usize {
        self.n_complete + self.n_m1_only + self.n_m2_only
    }
}

/// Class prototypes and mixing matrices drawn from the dataset seed.
#[derive(Debug, Clone)]
struct Generator {
    /// `[modality][class]` latent signal.
    signal: [Vec<Vec<f64>>; 2],
    /// Latent → raw maps.
    mixing: [Tensor2D; 2],
}

impl Generator {
    fn new(cfg: &DatasetConfig) -> Self {
        let mut rng = stream(cfg.seed, "prototypes", &[]);
        let l = cfg.latent_dim;
        let draw = |rng: &mut crate::rng::Stream| -> Vec<f64> { (0..l).map(|_| normal(rng)).collect() };
        let shared: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| draw(&mut rng)).collect();
        let private: [Vec<Vec<f64>>; 2] = [
            (0..cfg.n_classes).map(|_| draw(&mut rng)).collect(),
            (0..cfg.n_classes).map(|_| draw(&mut rng)).collect(),
        ];
        let (ws, wp) = (libm::sqrt(cfg.redundancy), libm::sqrt(1.0 - cfg.redundancy));
        let own = |m: usize, k: usize| -> Vec<f64> {
            shared[k]
                .iter()
                .zip(&private[m][k])
                .map(|(s, p)| ws * s + wp * p)
                .collect()
        };
        let signal = [0usize, 1].map(|m| {
            let modality = Modality::BOTH[m];
            (0..cfg.n_classes)
                .map(|k| {
                    if cfg.has_signal(k, modality) {
                        own(m, k)
                    } else {
                        own(m, cfg.confuser(k))
                    }
                })
                .collect()
        });
        let scale = 1.0 / libm::sqrt(l as f64);
        let mixing = [
            gaussian(&mut rng, cfg.raw_dim_m1, l, scale),
            gaussian(&mut rng, cfg.raw_dim_m2, l, scale),
        ];
        Self { signal, mixing }
    }

    fn raw(&self, m: usize, classes: &[usize], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
        let l = self.mixing[m].cols();
        let mut latent = vec![0.0; l];
        for &k in classes {
            for (z, s) in latent.iter_mut().zip(&self.signal[m][k]) {
                *z += s;
            }
        }
        let a = &self.mixing[m];
        (0..a.rows())
            .map(|r| crate::tensor::dot(a.row(r), &latent) + sigma * normal(rng))
            .collect()
    }
}

/// Generates complete train/val/test splits.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let gen = Generator::new(config);
    let make = |split_id: u64, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = stream(config.seed, "sample", &[split_id, i as u64]);
                let (classes, target) = match config.label_mode {
                    LabelMode::Single => {
                        let k = rng.random_range(0..config.n_classes);
                        (vec![k], LabelTarget::Single(k))
                    }
                    LabelMode::Multi => {
                        let count = rng.random_range(1..=3.min(config.n_classes));
                        let mut picked = permutation(&mut rng, config.n_classes);
                        picked.truncate(count);
                        picked.sort_unstable();
                        let mut bits = vec![false; config.n_classes];
                        for &k in &picked {
                            bits[k] = true;
                        }
                        (picked, LabelTarget::Multi(bits))
                    }
                };
                Sample {
                    raw_m1: gen.raw(0, &classes, config.noise_m1, &mut rng),
                    raw_m2: gen.raw(1, &classes, config.noise_m2, &mut rng),
                    mask: PresenceMask::BOTH,
                    target,
                }
            })
            .collect()
    };
    Ok(Dataset {
        config: config.clone(),
        train: make(0, config.train_size),
        val: make(1, config.val_size),
        test: make(2, config.test_size),
    })
}

/// How modality availability is assigned over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MissingProtocol {
    Complete,
    /// Percentages of samples that keep modality 1 and modality 2.
    RatioPair { m1_pct: f64, m2_pct: f64 },
    /// Every sample loses `missing`.
    InferenceOnly { missing: Modality },
    /// `η/2` percent of samples keep only m1, `η/2` keep only m2.
    EtaSplit { eta_pct: f64 },
    /// The `varying` modality is kept by `x_pct` percent of samples, the
    /// other by all of them.
    SweepPoint { varying: Modality, x_pct: f64 },
}

impl MissingProtocol {
    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        let ok = match *self {
            MissingProtocol::Complete | MissingProtocol::InferenceOnly { .. } => true,
            MissingProtocol::RatioPair { m1_pct, m2_pct } => pct(m1_pct) && pct(m2_pct),
            MissingProtocol::EtaSplit { eta_pct } => pct(eta_pct),
            MissingProtocol::SweepPoint { x_pct, .. } => pct(x_pct),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InfeasibleProtocol(format!("{self}: percentages must lie in [0, 100]")))
        }
    }

    /// Equivalent `(m1 %, m2 %)` pair, when the protocol has one.
    fn as_ratio(&self) -> Option<(f64, f64)> {
        match *self {
            MissingProtocol::Complete => Some((100.0, 100.0)),
            MissingProtocol::RatioPair { m1_pct, m2_pct } => Some((m1_pct, m2_pct)),
            MissingProtocol::InferenceOnly { missing: Modality::M1 } => Some((0.0, 100.0)),
            MissingProtocol::InferenceOnly { missing: Modality::M2 } => Some((100.0, 0.0)),
            MissingProtocol::SweepPoint { varying: Modality::M2, x_pct } => Some((100.0, x_pct)),
            MissingProtocol::SweepPoint { varying: Modality::M1, x_pct } => Some((x_pct, 100.0)),
            MissingProtocol::EtaSplit { .. } => None,
        }
    }
}

impl fmt::Display for MissingProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MissingProtocol::Complete => write!(f, "complete"),
            MissingProtocol::RatioPair { m1_pct, m2_pct } => write!(f, "ratio_pair:{m1_pct}:{m2_pct}"),
            MissingProtocol::InferenceOnly { missing } => write!(f, "inference_only:{}", missing.name()),
            MissingProtocol::EtaSplit { eta_pct } => write!(f, "eta_split:{eta_pct}"),
            MissingProtocol::SweepPoint { varying, x_pct } => {
                write!(f, "sweep_point:{}:{x_pct}", varying.name())
            }
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "m1" => Ok(Modality::M1),
        "m2" => Ok(Modality::M2),
        other => Err(Error::Config(format!("unknown modality '{other}'"))),
    }
}

fn parse_pct(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("bad percentage '{s}'")))
}

impl FromStr for MissingProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let p = match parts.as_slice() {
            ["complete"] => MissingProtocol::Complete,
            ["ratio_pair", a, b] => MissingProtocol::RatioPair {
                m1_pct: parse_pct(a)?,
                m2_pct: parse_pct(b)?,
            },
            ["inference_only", m] => MissingProtocol::InferenceOnly {
                missing: parse_modality(m)?,
            },
            ["eta_split", e] => MissingProtocol::EtaSplit { eta_pct: parse_pct(e)? },
            ["sweep_point", m, x] => MissingProtocol::SweepPoint {
                varying: parse_modality(m)?,
                x_pct: parse_pct(x)?,
            },
            _ => return Err(Error::Config(format!("unknown protocol '{s}'"))),
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

impl TryFrom<String> for MissingProtocol {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MissingProtocol> for String {
    fn from(p: MissingProtocol) -> String {
        p.to_string()
    }
}

/// `round(pct·n/100)` with halves rounded up.
pub fn percent_count(pct: f64, n: usize) -> usize {
    libm::floor(pct * n as f64 / 100.0 + 0.5) as usize
}

/// Applies a protocol to a complete split, replacing absent inputs with
/// zero placeholders. Which samples lose which modality is drawn from `seed`.
pub fn apply_protocol(split: &[Sample], protocol: &MissingProtocol, seed: u64) -> Result<(Vec<Sample>, SplitStats)> {
    protocol.validate()?;
    if split.iter().any(|s| !s.mask.is_complete()) {
        return Err(Error::InfeasibleProtocol(
            "protocols apply to complete splits only".into(),
        ));
    }
    let n = split.len();
    let (m1_only, m2_only) = match protocol.as_ratio() {
        Some((a1, a2)) => {
            let (k1, k2) = (percent_count(a1, n), percent_count(a2, n));
            if k1 + k2 < n {
                return Err(Error::InfeasibleProtocol(format!(
                    "{protocol}: {k1} + {k2} keeps cannot cover {n} samples without a both-missing sample"
                )));
            }
            (n - k2, n - k1)
        }
        None => {
            let MissingProtocol::EtaSplit { eta_pct } = *protocol else {
                unreachable!("only eta_split lacks a ratio form")
            };
            let half = percent_count(eta_pct / 2.0, n);
            if 2 * half > n {
                return Err(Error::InfeasibleProtocol(format!("{protocol}: too many incomplete samples")));
            }
            (half, half)
        }
    };
    let mut rng = stream(seed, "protocol", &[]);
    let order = permutation(&mut rng, n);
    let mut out = split.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        if rank < m1_only {
            out[i].drop_modality(Modality::M2);
        } else if rank < m1_only + m2_only {
            out[i].drop_modality(Modality::M1);
        }
    }
    let stats = SplitStats::of(&out);
    debug_assert_eq!(stats.total(), n);
    Ok((out, stats))
}

/// Shuffled index batches for one epoch; the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty { op: "batches" });
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = stream(seed, "batches", &[epoch as u64]);
    let order = permutation(&mut rng, n);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            train_size: 10,
            val_size: 4,
            test_size: 6,
            seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.train[0].raw_m1.len(), 64);
        let c = generate(&DatasetConfig { seed: 12, ..tiny() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn config_validation() {
        let bad = DatasetConfig {
            exclusive_m1: vec![1],
            exclusive_m2: vec![1],
            ..tiny()
        };
        assert!(bad.validate().is_err());
        assert!(DatasetConfig { redundancy: 1.5, ..tiny() }.validate().is_err());
        assert!(DatasetConfig { patch_m1: 7, ..tiny() }.validate().is_err());
        assert!(DatasetConfig { noise_m2: -1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn multi_label_draws_one_to_three() {
        let d = generate(&DatasetConfig {
            label_mode: LabelMode::Multi,
            ..tiny()
        })
        .unwrap();
        for s in &d.train {
            let LabelTarget::Multi(bits) = &s.target else { panic!() };
            let k = bits.iter().filter(|b| **b).count();
            assert!((1..=3).contains(&k));
        }
    }

    #[test]
    fn protocol_parsing_round_trips() {
        for s in ["complete", "ratio_pair:30:100", "inference_only:m2", "eta_split:70", "sweep_point:m2:50"] {
            let p: MissingProtocol = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("ratio_pair:130:100".parse::<MissingProtocol>().is_err());
        assert!("nope".parse::<MissingProtocol>().is_err());
    }

    #[test]
    fn ratio_pair_counts() {
        let d = generate(&tiny()).unwrap();
        let p = MissingProtocol::RatioPair { m1_pct: 30.0, m2_pct: 100.0 };
        let (masked, stats) = apply_protocol(&d.train, &p, 3).unwrap();
        assert_eq!(stats, SplitStats { n_complete: 3, n_m1_only: 0, n_m2_only: 7 });
        for s in masked.iter().filter(|s| !s.mask.m1_present) {
            assert!(s.raw_m1.iter().all(|&v| v == 0.0));
            assert!(s.raw(Modality::M1).is_none());
        }
    }

    #[test]
    fn infeasible_ratio() {
        let d = generate(&tiny()).unwrap();
        let p = MissingProtocol::RatioPair { m1_pct: 40.0, m2_pct: 50.0 };
        assert!(matches!(apply_protocol(&d.train, &p, 0), Err(Error::InfeasibleProtocol(_))));
    }

    #[test]
    fn inference_only_masks_everything() {
        let d = generate(&tiny()).unwrap();
        let p = MissingProtocol::InferenceOnly { missing: Modality::M2 };
        let (masked, _) = apply_protocol(&d.test, &p, 0).unwrap();
        assert!(masked.iter().all(|s| s.mask == PresenceMask::M1_ONLY));
    }

    #[test]
    fn batch_sizes_and_cover() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, batches(10, 4, 1, 0).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert!(all.iter().copied().eq(0..10));
        assert!(batches(0, 4, 1, 0).is_err());
        assert!(batches(10, 0, 1, 0).is_err());
    }
}
