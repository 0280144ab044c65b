//! Run configuration: line-oriented `key = value` files plus override
//! strings. Unknown keys are hard errors; the effective config echoes
//! back out through `to_kv` and reparses identically.

use std::path::PathBuf;

use rgpr_core::error::{Error, Result};
use rgpr_core::gpr::HeadKind;
use rgpr_core::posenet::NetworkConfig;
use rgpr_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Uniform OKS falloff constant for synthetic evaluation.
    pub oks_k: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::defaults(256),
            dataset_size: 16,
            dataset_seed: 1234,
            oks_k: 0.2,
            seed: 42,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn head_str(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Gpr => "gpr",
        HeadKind::RescaleSum => "rescale_sum",
    }
}

fn pairs_str(pairs: &[(usize, usize)]) -> String {
    pairs
        .iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::InvalidConfig {
        violations: vec![format!("key `{key}`: `{value}` is not a valid {want}")],
    }
}

impl RunConfig {
    /// Deterministic echo of every key.
    pub fn to_kv(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        format!(
            "width = {}\nnum_stages = {}\nblocks_per_stage = {}\ninput_h = {}\ninput_w = {}\n\
             num_keypoints = {}\nattention_enabled = {}\nhead = {}\n\
             lr0 = {}\nsgdr_t0 = {}\nsgdr_tmul = {}\neta_min = {}\nbatch_size = {}\nepochs = {}\n\
             sigma = {}\nflip = {}\nscale_jitter = {}\nrotation_max = {}\ncutout = {}\n\
             cutout_holes = {}\ncutout_size = {}\nflip_pairs = {}\n\
             dataset_size = {}\ndataset_seed = {}\noks_k = {}\nseed = {}\nout_dir = {}\n",
            n.width,
            n.num_stages,
            n.blocks_per_stage,
            n.input_h,
            n.input_w,
            n.num_keypoints,
            n.attention_enabled,
            head_str(n.head),
            t.lr0,
            t.sgdr_t0,
            t.sgdr_tmul,
            t.eta_min,
            t.batch_size,
            t.epochs,
            t.sigma,
            t.flip,
            t.scale_jitter,
            t.rotation_max,
            t.cutout,
            t.cutout_holes,
            t.cutout_size,
            pairs_str(&t.flip_pairs),
            self.dataset_size,
            self.dataset_seed,
            self.oks_k,
            self.seed,
            self.out_dir.display(),
        )
    }

    /// Apply one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! parse {
            ($want:expr) => {
                v.parse().map_err(|_| bad(key, v, $want))?
            };
        }
        match key {
            "width" => self.network.width = parse!("integer"),
            "num_stages" => self.network.num_stages = parse!("integer"),
            "blocks_per_stage" => self.network.blocks_per_stage = parse!("integer"),
            "input_h" => self.network.input_h = parse!("integer"),
            "input_w" => self.network.input_w = parse!("integer"),
            "num_keypoints" => self.network.num_keypoints = parse!("integer"),
            "attention_enabled" => self.network.attention_enabled = parse!("boolean"),
            "head" => {
                self.network.head = match v {
                    "gpr" => HeadKind::Gpr,
                    "rescale_sum" => HeadKind::RescaleSum,
                    _ => return Err(bad(key, v, "head kind (gpr|rescale_sum)")),
                }
            }
            "lr0" => self.train.lr0 = parse!("number"),
            "sgdr_t0" => self.train.sgdr_t0 = parse!("integer"),
            "sgdr_tmul" => self.train.sgdr_tmul = parse!("integer"),
            "eta_min" => self.train.eta_min = parse!("number"),
            "batch_size" => self.train.batch_size = parse!("integer"),
            "epochs" => self.train.epochs = parse!("integer"),
            "sigma" => self.train.sigma = parse!("number"),
            "flip" => self.train.flip = parse!("boolean"),
            "scale_jitter" => self.train.scale_jitter = parse!("number"),
            "rotation_max" => self.train.rotation_max = parse!("number"),
            "cutout" => self.train.cutout = parse!("boolean"),
            "cutout_holes" => self.train.cutout_holes = parse!("integer"),
            "cutout_size" => self.train.cutout_size = parse!("integer"),
            "flip_pairs" => {
                let mut pairs = Vec::new();
                for part in v.split(',').filter(|p| !p.trim().is_empty()) {
                    let (a, b) = part
                        .trim()
                        .split_once('-')
                        .ok_or_else(|| bad(key, v, "pair list like 0-1,2-3"))?;
                    pairs.push((
                        a.parse().map_err(|_| bad(key, v, "pair list like 0-1,2-3"))?,
                        b.parse().map_err(|_| bad(key, v, "pair list like 0-1,2-3"))?,
                    ));
                }
                self.train.flip_pairs = pairs;
            }
            "dataset_size" => self.dataset_size = parse!("integer"),
            "dataset_seed" => self.dataset_seed = parse!("integer"),
            "oks_k" => self.oks_k = parse!("number"),
            "seed" => self.seed = parse!("integer"),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                return Err(Error::InvalidConfig {
                    violations: vec![format!("unknown config key `{key}`")],
                })
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines (blank lines and `#` comments allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidConfig {
                violations: vec![format!("line {}: expected key = value", lineno + 1)],
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| Error::InvalidConfig {
                violations: vec![format!("override `{item}`: expected key=value")],
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.dataset_size == 0 {
            return Err(Error::InvalidConfig {
                violations: vec!["dataset_size must be >= 1".to_string()],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.set("width", "8").unwrap();
        cfg.set("flip_pairs", "0-1,4-5").unwrap();
        cfg.set("head", "rescale_sum").unwrap();
        cfg.set("lr0", "0.25").unwrap();
        let echoed = cfg.to_kv();
        assert_eq!(RunConfig::from_kv(&echoed).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("widht = 8\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\nwidth = 4\n").unwrap();
        assert_eq!(cfg.network.width, 4);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("epochs", "many").unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }
}
