//! Class prototypes: unit vectors in feature space, split into base classes
//! (learned during training) and novel classes (inserted at morph time).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::numkernel::{l2_normalize, norm, VecF};

/// Stored prototypes are unit norm to this tolerance.
pub const UNIT_TOL: f64 = 1e-9;

/// Default fusion weight of the previous prototype in the E-step.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: u32,
    pub vector: VecF,
}

/// Base and novel prototypes. Every operation returns a new set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    base: BTreeMap<u32, VecF>,
    novel: BTreeMap<u32, VecF>,
    dim: usize,
}

impl PrototypeSet {
    pub fn empty(dim: usize) -> Self {
        PrototypeSet {
            base: BTreeMap::new(),
            novel: BTreeMap::new(),
            dim,
        }
    }

    /// Base prototypes from (unnormalized) semantic vectors.
    pub fn init_from_semantic<I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, VecF)>,
    {
        let mut base = BTreeMap::new();
        let mut dim = None;
        for (class_id, v) in vectors {
            if class_id == 0 {
                return Err(Error::ReservedClassId);
            }
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: v.len(),
                });
            }
            if base.insert(class_id, l2_normalize(&v)?).is_some() {
                return Err(Error::DuplicateClass(class_id));
            }
        }
        let dim = dim.ok_or(Error::Empty("no semantic vectors"))?;
        Ok(PrototypeSet {
            base,
            novel: BTreeMap::new(),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &BTreeMap<u32, VecF> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeMap<u32, VecF> {
        &self.novel
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.base.keys().copied().collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.novel.keys().copied().collect()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.base.contains_key(&class_id) || self.novel.contains_key(&class_id)
    }

    pub fn get(&self, class_id: u32) -> Option<&VecF> {
        self.base
            .get(&class_id)
            .or_else(|| self.novel.get(&class_id))
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fuses class-mean features into the base prototypes:
    /// `p ← normalize((1 − λ)·normalize(v) + λ·p)`.
    ///
    /// Classes absent from `means` keep their prototype. With `λ = 1` the
    /// stored vectors are returned bit-for-bit.
    pub fn e_step_update(&self, means: &BTreeMap<u32, VecF>, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
        let mut next = self.clone();
        for (&class_id, mean) in means {
            let old = self
                .base
                .get(&class_id)
                .ok_or(Error::UnknownClass(class_id))?;
            if mean.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    got: mean.len(),
                });
            }
            let v = l2_normalize(mean)?;
            if lambda == 1.0 {
                continue;
            }
            let fused: VecF = v
                .iter()
                .zip(old)
                .map(|(vk, pk)| (1.0 - lambda) * vk + lambda * pk)
                .collect();
            // v and p antipodal with λ = 0.5 cancel exactly; keep the old prototype.
            let updated = match l2_normalize(&fused) {
                Ok(p) => p,
                Err(Error::DegenerateVector { .. }) => old.clone(),
                Err(e) => return Err(e),
            };
            next.base.insert(class_id, updated);
        }
        Ok(next)
    }

    /// Inserts a novel prototype from a class-mean feature vector.
    pub fn add_novel(&self, class_id: u32, mean_vector: &[f64]) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::ReservedClassId);
        }
        if self.contains(class_id) {
            return Err(Error::ClassCollision(class_id));
        }
        if mean_vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: mean_vector.len(),
            });
        }
        let mut next = self.clone();
        next.novel.insert(class_id, l2_normalize(mean_vector)?);
        Ok(next)
    }

    /// Zero-shot registration: the class's semantic vector stands in for the
    /// exemplar mean.
    pub fn add_novel_semantic(&self, class_id: u32, semantic: &[f64]) -> Result<Self> {
        self.add_novel(class_id, semantic)
    }

    /// Base ∪ novel in ascending class id.
    pub fn all_prototypes(&self) -> Vec<Prototype> {
        let mut all: Vec<Prototype> = self
            .base
            .iter()
            .chain(&self.novel)
            .map(|(&class_id, v)| Prototype {
                class_id,
                vector: v.clone(),
            })
            .collect();
        all.sort_by_key(|p| p.class_id);
        all
    }

    /// Base prototypes only, ascending class id.
    pub fn base_prototypes(&self) -> Vec<Prototype> {
        self.base
            .iter()
            .map(|(&class_id, v)| Prototype {
                class_id,
                vector: v.clone(),
            })
            .collect()
    }

    /// Checks unit norm, dimensions and base/novel disjointness.
    pub fn validate(&self) -> Result<()> {
        for (&id, v) in self.base.iter().chain(&self.novel) {
            if id == 0 {
                return Err(Error::ReservedClassId);
            }
            if v.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            if (norm(v) - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidParameter(format!(
                    "prototype {id} is not unit norm"
                )));
            }
        }
        if let Some(id) = self.base.keys().find(|id| self.novel.contains_key(id)) {
            return Err(Error::ClassCollision(*id));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        write_vector_sections(&self.base, &self.novel)
    }

    /// Parses the text format, keeping stored vectors bit-for-bit.
    pub fn from_text(text: &str) -> Result<Self> {
        let (base, novel) = read_vector_sections(text)?;
        let dim = base
            .values()
            .chain(novel.values())
            .next()
            .map_or(0, |v| v.len());
        let set = PrototypeSet { base, novel, dim };
        set.validate()?;
        Ok(set)
    }
}

/// Writes `class_id<TAB>v1 v2 ... vd` lines: base section, `---`, novel
/// section. 17 significant digits, so parsing is exact.
pub fn write_vector_sections(
    base: &BTreeMap<u32, VecF>,
    novel: &BTreeMap<u32, VecF>,
) -> String {
    let mut out = String::new();
    let section = |map: &BTreeMap<u32, VecF>, out: &mut String| {
        for (id, v) in map {
            let _ = write!(out, "{id}\t");
            for (k, x) in v.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:.16e}");
            }
            out.push('\n');
        }
    };
    section(base, &mut out);
    out.push_str("---\n");
    section(novel, &mut out);
    out
}

/// Inverse of [`write_vector_sections`]. A missing `---` means everything is base.
#[allow(clippy::type_complexity)]
pub fn read_vector_sections(
    text: &str,
) -> Result<(BTreeMap<u32, VecF>, BTreeMap<u32, VecF>)> {
    let mut base = BTreeMap::new();
    let mut novel = BTreeMap::new();
    let mut in_novel = false;
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == "---" {
            if in_novel {
                return Err(parse_err(lineno, "second section separator"));
            }
            in_novel = true;
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "expected class_id<TAB>values"))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad class id: {e}")))?;
        let v = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<VecF, _>>()
            .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?;
        if v.is_empty() || !v.iter().all(|x| x.is_finite()) {
            return Err(parse_err(lineno, "empty or non-finite vector"));
        }
        let d = *dim.get_or_insert(v.len());
        if v.len() != d {
            return Err(parse_err(
                lineno,
                format!("vector has {} components, expected {d}", v.len()),
            ));
        }
        if base.contains_key(&id) || novel.contains_key(&id) {
            return Err(parse_err(lineno, format!("duplicate class id {id}")));
        }
        if in_novel {
            novel.insert(id, v);
        } else {
            base.insert(id, v);
        }
    }
    Ok((base, novel))
}
