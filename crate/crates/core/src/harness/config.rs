//! Training configuration and flat `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, HeadMode, TargetMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::MaskConfig;
use crate::metrics::DEFAULT_KS;
use crate::models::{EvalMode, ModelFamily};

/// Model selection always uses validation mR at this K.
pub const SELECTION_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Desk,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelFamily,
    pub mode: EvalMode,
    pub align: AlignConfig,
    pub mask: MaskConfig,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub eval_every: usize,
    pub base_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    pub graph_constraint: bool,
    pub detector_epochs: usize,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub size: ModelSize,
    pub exec: Exec,
    /// Write a checkpoint at every evaluation point (otherwise only the selected one).
    pub keep_all_checkpoints: bool,
}

impl TrainConfig {
    pub fn new(model: ModelFamily) -> Self {
        let (mode, base_lr) = match model {
            ModelFamily::MiniSgtr => (EvalMode::SgDet, 1e-3),
            ModelFamily::MiniMotifs => (EvalMode::PredCls, 0.05),
        };
        let align = AlignConfig::default();
        TrainConfig {
            model,
            mode,
            align,
            mask: MaskConfig { p: align.p, seed: 0, rescale: false },
            batch_size: 16,
            total_iterations: 5000,
            eval_every: 500,
            base_lr,
            clip_norm: 5.0,
            seed: 0,
            eval_ks: DEFAULT_KS.to_vec(),
            graph_constraint: true,
            detector_epochs: 3,
            train_limit: None,
            val_limit: None,
            size: ModelSize::Desk,
            exec: Exec::Parallel,
            keep_all_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.mask.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.eval_every == 0 || self.total_iterations < self.eval_every {
            return bad("need total_iterations >= eval_every >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.eval_ks.contains(&0) {
            return Err(Error::InvalidK(0));
        }
        if self.model == ModelFamily::MiniSgtr && self.mode != EvalMode::SgDet {
            return Err(Error::UnsupportedMode { family: self.model.name().into(), mode: self.mode.name().into() });
        }
        Ok(())
    }

    /// Applies one override. `p` and `seed` keep the mask settings in step.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "model" => {
                let family: ModelFamily = v.parse()?;
                if family != self.model {
                    let fresh = TrainConfig::new(family);
                    self.model = family;
                    self.mode = fresh.mode;
                    self.base_lr = fresh.base_lr;
                }
            }
            "mode" => self.mode = v.parse()?,
            "p" => {
                self.align.p = num(key, v)?;
                self.mask.p = self.align.p;
            }
            "lambda" => self.align.lambda = num(key, v)?,
            "align" => self.align.target_mode = v.parse::<TargetMode>()?,
            "head" => self.align.head_mode = v.parse::<HeadMode>()?,
            "seed" => {
                self.seed = num(key, v)?;
                self.mask.seed = self.seed;
            }
            "mask_seed" => self.mask.seed = num(key, v)?,
            "batch_size" | "batch" => self.batch_size = num(key, v)?,
            "iterations" | "total_iterations" => self.total_iterations = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "lr" | "base_lr" => self.base_lr = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "k" | "eval_ks" => self.eval_ks = parse_ks(v)?,
            "graph_constraint" => self.graph_constraint = flag(key, v)?,
            "detector_epochs" => self.detector_epochs = num(key, v)?,
            "train_limit" => self.train_limit = Some(num(key, v)?),
            "val_limit" => self.val_limit = Some(num(key, v)?),
            "size" => {
                self.size = match v {
                    "desk" => ModelSize::Desk,
                    "micro" => ModelSize::Micro,
                    _ => return Err(Error::InvalidConfig(format!("size: unknown {v:?}"))),
                }
            }
            "exec" => {
                self.exec = match v {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    _ => return Err(Error::InvalidConfig(format!("exec: unknown {v:?}"))),
                }
            }
            "keep_all_checkpoints" => self.keep_all_checkpoints = flag(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Evaluation Ks with the selection K always present.
    pub fn ks_with_selection(&self) -> Vec<usize> {
        let mut ks = self.eval_ks.clone();
        if !ks.contains(&SELECTION_K) {
            ks.push(SELECTION_K);
        }
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

pub fn parse_ks(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            let k: i64 = s.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad K {s:?}")))?;
            if k <= 0 {
                Err(Error::InvalidK(k))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Parses flat `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let text = "# run\nmodel = mini-motifs\np=0.2\nlambda=1 # weak\nalign=sa\nhead=tied\nseed=3\n\niterations=40\neval_every=20\n";
        let kv = parse_key_values(text, Path::new("x.cfg")).unwrap();
        let mut cfg = TrainConfig::new(ModelFamily::MiniSgtr);
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.model, ModelFamily::MiniMotifs);
        assert_eq!(cfg.mode, EvalMode::PredCls);
        assert_eq!((cfg.align.p, cfg.mask.p, cfg.align.lambda), (0.2, 0.2, 1.0));
        assert_eq!(cfg.align.target_mode, TargetMode::Supervised);
        assert_eq!(cfg.align.head_mode, HeadMode::Tied);
        assert_eq!((cfg.seed, cfg.mask.seed), (3, 3));
        cfg.validate().unwrap();
    }

    #[test]
    fn malformed_lines_report_their_position() {
        let err = parse_key_values("a=1\nbroken\n", Path::new("g.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut cfg = TrainConfig::new(ModelFamily::MiniSgtr);
        cfg.mode = EvalMode::PredCls;
        assert!(matches!(cfg.validate(), Err(Error::UnsupportedMode { .. })));
        assert!(matches!(parse_ks("20,0"), Err(Error::InvalidK(0))));
        let mut cfg = TrainConfig::new(ModelFamily::MiniMotifs);
        assert!(cfg.set("p", "1.5").is_ok());
        assert!(cfg.validate().is_err());
        assert!(cfg.set("bogus", "1").is_err());
    }
}
