//! Labeled window datasets built from integrated trajectories.
//!
//! Each dataset samples a few parameter-grid values as classes, integrates
//! several trajectories per class, splits every trajectory 70:15:15 along
//! time *before* windowing, and cuts each split segment into
//! non-overlapping fixed-length windows. Windows carry their class label
//! and full provenance (class, trial, start index) so they can be
//! re-extracted bit-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PulseError, Result};
use crate::rng;
use crate::sde::{self, SystemSpec, MAX_REDRAWS};

const MAGIC: &[u8; 8] = b"PULSEDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where a window came from: class index, trial index within the class,
/// and start offset within the (burn-in-stripped) trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub class: usize,
    pub trial: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub family: String,
    pub sigma: f64,
    pub dt: f64,
    pub n_classes: usize,
    pub window: usize,
    pub trials_per_class: usize,
    pub steps_per_trial: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            family: "lorenz".into(),
            sigma: 0.0,
            dt: 1e-3,
            n_classes: 5,
            window: 100,
            trials_per_class: 5,
            steps_per_trial: 20_000,
            seed: 0,
        }
    }
}

/// Hex SHA-256 of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct WindowDataset {
    /// Row-major `[n, w, m]`.
    pub windows: Vec<f64>,
    pub n: usize,
    pub w: usize,
    pub m: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub provenance: Vec<Provenance>,
    /// Swept parameter value per class label.
    pub class_params: Vec<f64>,
    pub config: DatasetConfig,
}

impl WindowDataset {
    pub fn window(&self, i: usize) -> &[f64] {
        &self.windows[i * self.w * self.m..(i + 1) * self.w * self.m]
    }

    /// Indices of windows belonging to a split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.n).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Noise scale input for one class of a dataset (0 when σ = 0).
fn class_rms(cfg: &DatasetConfig, spec: &SystemSpec) -> Result<f64> {
    if cfg.sigma > 0.0 {
        sde::estimate_rms(spec, rng::derive_seed(cfg.seed, "rms"))
    } else {
        Ok(0.0)
    }
}

/// Re-derive the exact trajectory a window was cut from; provenance
/// `(class, trial)` plus the dataset config fully determine it.
pub fn trial_trajectory(
    cfg: &DatasetConfig,
    param_value: f64,
    class: usize,
    trial: usize,
) -> Result<sde::Trajectory> {
    let spec = sde::spec_for(&cfg.family, param_value, cfg.sigma, cfg.dt)?;
    let rms = class_rms(cfg, &spec)?;
    let trial_seed = rng::derive_seed(cfg.seed, &format!("traj/{class}/{trial}"));
    integrate_trial(&spec, cfg.steps_per_trial, rms, trial_seed)
}

fn integrate_trial(
    spec: &SystemSpec,
    steps: usize,
    rms: f64,
    trial_seed: u64,
) -> Result<sde::Trajectory> {
    let mut y0_rng = rng::stream(trial_seed, "y0");
    let m = spec.dims();
    let mut last_err = None;
    for _attempt in 0..=MAX_REDRAWS {
        let y0: Vec<f64> = (0..m).map(|_| rng::normal(&mut y0_rng)).collect();
        match sde::integrate(spec, &y0, steps, rms, trial_seed) {
            Ok(t) => return Ok(t),
            Err(e @ PulseError::IntegrationDiverged { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

/// 70:15:15 partition of a length-`t_len` time axis: segment start
/// offsets and lengths in (train, val, test) order.
pub fn split_segments(t_len: usize) -> [(usize, usize); 3] {
    let train = t_len * 70 / 100;
    let val = t_len * 15 / 100;
    let test = t_len - train - val;
    [(0, train), (train, val), (train + val, test)]
}

/// Build a labeled window dataset for one family and noise level.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<WindowDataset> {
    if cfg.window == 0 {
        return Err(PulseError::Config("window length must be positive".into()));
    }
    let grid = sde::parameter_grid(&cfg.family)?;
    if grid.len() < cfg.n_classes {
        return Err(PulseError::Config(format!(
            "family '{}' has {} grid values, {} classes requested",
            cfg.family,
            grid.len(),
            cfg.n_classes
        )));
    }
    let class_params: Vec<f64> = {
        let mut rng = rng::stream(cfg.seed, "class-params");
        grid.choose_multiple(&mut rng, cfg.n_classes).copied().collect()
    };

    let mut windows = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut provenance = Vec::new();
    let (w, mut m) = (cfg.window, 0);
    for (class, &value) in class_params.iter().enumerate() {
        let spec = sde::spec_for(&cfg.family, value, cfg.sigma, cfg.dt)?;
        m = spec.dims();
        let rms = class_rms(cfg, &spec)?;
        for trial in 0..cfg.trials_per_class {
            let trial_seed = rng::derive_seed(cfg.seed, &format!("traj/{class}/{trial}"));
            let traj = integrate_trial(&spec, cfg.steps_per_trial, rms, trial_seed)?;
            for (si, &(seg_start, seg_len)) in split_segments(traj.t_len).iter().enumerate() {
                if seg_len < w {
                    return Err(PulseError::Config(format!(
                        "window {} exceeds shortest split segment {} \
                         (trajectory length {})",
                        w, seg_len, traj.t_len
                    )));
                }
                let split = Split::all()[si];
                for k in 0..seg_len / w {
                    let start = seg_start + k * w;
                    windows.extend_from_slice(
                        &traj.values[start * m..(start + w) * m],
                    );
                    labels.push(class);
                    splits.push(split);
                    provenance.push(Provenance {
                        class,
                        trial,
                        start,
                    });
                }
            }
        }
    }
    let n = labels.len();
    Ok(WindowDataset {
        windows,
        n,
        w,
        m,
        labels,
        splits,
        provenance,
        class_params,
        config: cfg.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DatasetConfig,
    config_hash: String,
    n: usize,
    w: usize,
    m: usize,
    class_params: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    provenance: Vec<Provenance>,
}

impl WindowDataset {
    /// Serialize as magic + JSON header (length-prefixed) + little-endian
    /// f64 window data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            n: self.n,
            w: self.w,
            m: self.m,
            class_params: self.class_params.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            provenance: self.provenance.clone(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| PulseError::Format(format!("header encode: {e}")))?;
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        let mut buf = Vec::with_capacity(self.windows.len() * 8);
        for v in &self.windows {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WindowDataset> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PulseError::Format(format!(
                "{}: not a dataset file (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| PulseError::Format(format!("header decode: {e}")))?;
        let count = header.n * header.w * header.m;
        let mut data = vec![0u8; count * 8];
        f.read_exact(&mut data)?;
        let windows: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(WindowDataset {
            windows,
            n: header.n,
            w: header.w,
            m: header.m,
            labels: header.labels,
            splits: header.splits,
            provenance: header.provenance,
            class_params: header.class_params,
            config: header.config,
        })
    }

    /// Write one CSV per split for inspection: a row per (window, step).
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::all() {
            let mut out = String::new();
            out.push_str("window,label,class,trial,start,t");
            for c in 0..self.m {
                out.push_str(&format!(",y{c}"));
            }
            out.push('\n');
            for i in self.split_indices(split) {
                let p = self.provenance[i];
                let win = self.window(i);
                for t in 0..self.w {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}",
                        i, self.labels[i], p.class, p.trial, p.start, t
                    ));
                    for c in 0..self.m {
                        out.push_str(&format!(",{}", win[t * self.m + c]));
                    }
                    out.push('\n');
                }
            }
            fs::write(dir.join(format!("{}.csv", split.name())), out)?;
        }
        Ok(())
    }
}
