//! Run configuration: a TOML file of `key = value` pairs, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    #[default]
    Teacher,
    Baked,
}

/// Model size profile for both baked renderers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub scene: Option<PathBuf>,
    pub env: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,

    // rendering
    pub provider: Provider,
    pub spp: usize,
    pub bounces: u8,
    pub secondary_rays: usize,
    pub denoise: bool,
    pub width: usize,
    pub height: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub cnn: Option<PathBuf>,
    pub hash: Option<PathBuf>,

    // pseudo data
    pub data: Option<PathBuf>,
    pub n_random: usize,
    pub train_poses: usize,
    pub test_poses: usize,
    pub min_angle_deg: f64,

    // training
    pub profile: Profile,
    pub steps: Option<u64>,
    pub lr0: Option<f64>,
    pub poses_per_batch: Option<usize>,
    pub points_per_batch: Option<usize>,
    pub dirs_per_point: Option<usize>,
    pub resume: Option<PathBuf>,

    // evaluation and benchmarks
    pub calibrate_albedo: bool,
    pub bench_spp: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            scene: None,
            env: None,
            out: None,
            seed: 0,
            threads: None,
            provider: Provider::Teacher,
            spp: 16,
            bounces: 1,
            secondary_rays: 8,
            denoise: true,
            width: 128,
            height: 128,
            azimuth_deg: 30.0,
            elevation_deg: 35.0,
            cnn: None,
            hash: None,
            data: None,
            n_random: 512,
            train_poses: 8,
            test_poses: 4,
            min_angle_deg: 1.0,
            profile: Profile::Desk,
            steps: None,
            lr0: None,
            poses_per_batch: None,
            points_per_batch: None,
            dirs_per_point: None,
            resume: None,
            calibrate_albedo: false,
            bench_spp: vec![4, 8, 16, 32],
            repeats: 5,
            warmup: 2,
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str, path: &Path) -> Result<Settings> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Settings> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.bounces) {
            return Err(Error::Config(format!("bounces must be 1 or 2, got {}", self.bounces)));
        }
        if self.spp == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("spp and resolution must be positive".into()));
        }
        if self.repeats == 0 || self.bench_spp.is_empty() {
            return Err(Error::Config("bench needs at least one repeat and one spp".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// sha256 over the settings that influence outputs (not the output path
    /// or worker count).
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.out = None;
        s.threads = None;
        let json = serde_json::to_string(&s).expect("settings serialize");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        let p = v.as_ref().ok_or_else(|| Error::Config(format!("--{flag} is required")))?;
        if !p.exists() {
            return Err(Error::Config(format!("--{flag} {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn out_dir(&self) -> Result<&PathBuf> {
        let p = self.out.as_ref().ok_or_else(|| Error::Config("--out is required".into()))?;
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_defaults() {
        let s = Settings::from_toml("spp = 64\nprovider = \"baked\"\nbench_spp = [1, 2]\n", Path::new("x")).unwrap();
        assert_eq!(s.spp, 64);
        assert_eq!(s.provider, Provider::Baked);
        assert_eq!(s.bench_spp, vec![1, 2]);
        assert_eq!(s.bounces, 1);
        assert!(Settings::from_toml("spp = -1", Path::new("x")).is_err());
        assert!(Settings::from_toml("sp = 1", Path::new("x")).is_err());
    }

    #[test]
    fn hash_ignores_out_and_threads() {
        let a = Settings::default();
        let b = Settings {
            out: Some("elsewhere".into()),
            threads: Some(3),
            ..Settings::default()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = Settings { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn bounces_validated() {
        let s = Settings { bounces: 3, ..Settings::default() };
        assert!(s.validate().is_err());
    }
}
