//! Class tables: the classifier's classes, the evaluation classes, and the
//! merge map between them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ClassError {
    #[error("class table: {0}")]
    Invalid(String),
}

/// Target name that drops a source class.
pub const DISCARD: &str = "discard";

/// Serialized form of a [`ClassTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTableConfig {
    /// Classifier output classes, in score-map channel order.
    pub source: Vec<String>,
    /// Classes reported by evaluation and stored in the map.
    pub target: Vec<String>,
    /// Every source class mapped to a target class or to `"discard"`.
    pub merge: BTreeMap<String, String>,
    /// RGB color per target class.
    pub palette: Vec<[u8; 3]>,
    /// RGB color per source class, used when rendering score maps.
    pub source_palette: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Target index per source class, `None` for discarded classes.
    pub merge: Vec<Option<usize>>,
    pub palette: Vec<[u8; 3]>,
    pub source_palette: Vec<[u8; 3]>,
}

impl ClassTable {
    pub fn from_config(cfg: &ClassTableConfig) -> Result<Self, ClassError> {
        let bad = |m: String| Err(ClassError::Invalid(m));
        if cfg.source.len() < 2 || cfg.target.is_empty() {
            return bad("need at least two source classes and one target class".into());
        }
        if cfg.palette.len() != cfg.target.len() {
            return bad("one palette color per target class".into());
        }
        if cfg.source_palette.len() != cfg.source.len() {
            return bad("one source palette color per source class".into());
        }
        for (i, name) in cfg.source.iter().enumerate() {
            if cfg.source[..i].contains(name) {
                return bad(format!("duplicate source class {name}"));
            }
        }
        for (i, name) in cfg.target.iter().enumerate() {
            if name == DISCARD || cfg.target[..i].contains(name) {
                return bad(format!("invalid or duplicate target class {name}"));
            }
        }
        if let Some(k) = cfg.merge.keys().find(|k| !cfg.source.contains(k)) {
            return bad(format!("merge entry for unknown class {k}"));
        }
        let mut merge = Vec::with_capacity(cfg.source.len());
        for name in &cfg.source {
            let Some(to) = cfg.merge.get(name) else {
                return bad(format!("merge map has no entry for {name}"));
            };
            if to == DISCARD {
                merge.push(None);
            } else if let Some(j) = cfg.target.iter().position(|t| t == to) {
                merge.push(Some(j));
            } else {
                return bad(format!("{name} maps to unknown class {to}"));
            }
        }
        Ok(Self {
            source: cfg.source.clone(),
            target: cfg.target.clone(),
            merge,
            palette: cfg.palette.clone(),
            source_palette: cfg.source_palette.clone(),
        })
    }

    pub fn to_config(&self) -> ClassTableConfig {
        ClassTableConfig {
            source: self.source.clone(),
            target: self.target.clone(),
            merge: self
                .source
                .iter()
                .zip(&self.merge)
                .map(|(s, m)| {
                    let to = m.map_or(DISCARD.to_string(), |j| self.target[j].clone());
                    (s.clone(), to)
                })
                .collect(),
            palette: self.palette.clone(),
            source_palette: self.source_palette.clone(),
        }
    }

    /// Twelve street-scene classes merged into seven: sky and unlabeled
    /// dropped, sign into pole, rider into pedestrian, fence into building.
    pub fn urban_default() -> Self {
        let source = [
            "unlabeled",
            "sky",
            "building",
            "pole",
            "road",
            "undrivable_road",
            "vegetation",
            "sign",
            "fence",
            "vehicle",
            "pedestrian",
            "rider",
        ];
        let target = [
            "building",
            "pole",
            "road",
            "undrivable_road",
            "vegetation",
            "vehicle",
            "pedestrian",
        ];
        let merge = [
            None,
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(3),
            Some(4),
            Some(1),
            Some(0),
            Some(5),
            Some(6),
            Some(6),
        ];
        Self {
            source: source.iter().map(|s| s.to_string()).collect(),
            target: target.iter().map(|s| s.to_string()).collect(),
            merge: merge.to_vec(),
            palette: vec![
                [255, 255, 255],
                [0, 255, 255],
                [139, 69, 19],
                [191, 255, 0],
                [0, 160, 0],
                [255, 0, 0],
                [255, 255, 0],
            ],
            source_palette: vec![
                [128, 0, 128],
                [0, 0, 255],
                [255, 255, 255],
                [0, 255, 255],
                [139, 69, 19],
                [191, 255, 0],
                [0, 160, 0],
                [255, 140, 0],
                [128, 128, 128],
                [255, 0, 0],
                [255, 255, 0],
                [255, 215, 0],
            ],
        }
    }

    pub fn source_count(&self) -> usize {
        self.source.len()
    }

    pub fn target_count(&self) -> usize {
        self.target.len()
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.target.iter().position(|t| t == name)
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.source.iter().position(|t| t == name)
    }

    /// Sums source probabilities into target classes and renormalizes.
    /// Returns `None` when all mass sat on discarded classes.
    pub fn merge_probs(&self, probs: &[f64]) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.target.len()];
        for (p, m) in probs.iter().zip(&self.merge) {
            if let Some(j) = m {
                out[*j] += p;
            }
        }
        let sum: f64 = out.iter().sum();
        if !(sum > 0.0) {
            return None;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        Some(out)
    }

    /// Target class of a source label, `None` if discarded.
    pub fn merge_label(&self, source: u32) -> Option<u32> {
        self.merge.get(source as usize).copied().flatten().map(|j| j as u32)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urban_merge() {
        let t = ClassTable::urban_default();
        assert_eq!(t.source_count(), 12);
        assert_eq!(t.target_count(), 7);
        let sign = t.source_index("sign").unwrap();
        assert_eq!(t.merge_label(sign as u32), t.target_index("pole").map(|i| i as u32));
        assert_eq!(t.merge_label(t.source_index("sky").unwrap() as u32), None);
        let mut p = vec![0.0; 12];
        p[t.source_index("sky").unwrap()] = 0.5;
        p[t.source_index("rider").unwrap()] = 0.25;
        p[t.source_index("pedestrian").unwrap()] = 0.25;
        let m = t.merge_probs(&p).unwrap();
        assert_eq!(m[t.target_index("pedestrian").unwrap()], 1.0);
        let mut only_sky = vec![0.0; 12];
        only_sky[1] = 1.0;
        assert!(t.merge_probs(&only_sky).is_none());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let t = ClassTable::urban_default();
        let cfg = t.to_config();
        assert_eq!(ClassTable::from_config(&cfg).unwrap(), t);
        let mut missing = cfg.clone();
        missing.merge.remove("fence");
        assert!(ClassTable::from_config(&missing).is_err());
        let mut unknown = cfg.clone();
        unknown.merge.insert("fence".into(), "wall".into());
        assert!(ClassTable::from_config(&unknown).is_err());
        let mut palette = cfg;
        palette.palette.pop();
        assert!(ClassTable::from_config(&palette).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
