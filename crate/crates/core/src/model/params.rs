use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::arch::Architecture;

/// A contiguous slice of the flat parameter vector.
///
/// A group is flagged `normalised` when a layer norm directly downstream of
/// it makes the network output invariant to its positive rescaling. Weight
/// and bias groups are kept separate so precisions can be tied per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub normalised: bool,
    pub bias: bool,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Flat parameter vector with its partition into named groups. The direct-sum
/// split into normalised and non-normalised parts is recovered from the
/// group flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedParams {
    pub values: Vec<f64>,
    pub groups: Vec<ParamGroup>,
}

impl GroupedParams {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Build the group layout for an architecture with all values zero.
    pub fn layout(arch: &Architecture) -> GroupedParams {
        let mut groups = Vec::new();
        let mut cursor = 0usize;
        let mut push = |groups: &mut Vec<ParamGroup>, name: String, len: usize, normalised: bool, bias: bool| {
            groups.push(ParamGroup { name, start: cursor, len, normalised, bias });
            cursor += len;
        };
        let mut fan_in = arch.input_dim;
        for (i, h) in arch.hidden.iter().enumerate() {
            push(&mut groups, format!("layer{i}.weight"), h.width * fan_in, h.layer_norm, false);
            if h.bias {
                // biases stay in the non-normalised set; rescaling them alone
                // shifts the pre-activations rather than scaling them
                push(&mut groups, format!("layer{i}.bias"), h.width, false, true);
            }
            if h.layer_norm && h.ln_affine {
                push(&mut groups, format!("layer{i}.ln_gamma"), h.width, false, false);
                push(&mut groups, format!("layer{i}.ln_beta"), h.width, false, true);
            }
            fan_in = h.width;
        }
        push(&mut groups, "final.weight".into(), arch.output_dim * fan_in, false, false);
        if arch.final_bias {
            push(&mut groups, "final.bias".into(), arch.output_dim, false, true);
        }
        GroupedParams { values: vec![0.0; cursor], groups }
    }

    /// Seeded initialisation: weights scaled by 1/sqrt(fan_in), biases and
    /// beta zero, gamma one.
    pub fn init(arch: &Architecture, seed: u64) -> GroupedParams {
        let mut p = Self::layout(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = arch.input_dim;
        let mut gi = 0usize;
        for h in &arch.hidden {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[p.groups[gi].range()] {
                *v = rng.gen_range(-1.0..1.0) * scale * 3.0f64.sqrt();
            }
            gi += 1;
            if h.bias {
                gi += 1;
            }
            if h.layer_norm && h.ln_affine {
                for v in &mut p.values[p.groups[gi].range()] {
                    *v = 1.0;
                }
                gi += 2;
            }
            fan_in = h.width;
        }
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.values[p.groups[gi].range()] {
            *v = rng.gen_range(-1.0..1.0) * scale * 3.0f64.sqrt();
        }
        p
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn with_values(&self, values: Vec<f64>) -> GroupedParams {
        assert_eq!(values.len(), self.values.len());
        GroupedParams { values, groups: self.groups.clone() }
    }

    /// Indices of entries in normalised groups.
    pub fn normalised_indices(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.normalised)
            .flat_map(|g| g.range())
            .collect()
    }

    /// Mask of entries in normalised groups, 1.0 for normalised.
    pub fn normalised_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.values.len()];
        for g in self.groups.iter().filter(|g| g.normalised) {
            for v in &mut m[g.range()] {
                *v = 1.0;
            }
        }
        m
    }

    /// The normalised component, zero elsewhere.
    pub fn normalised_part(&self) -> Vec<f64> {
        let mask = self.normalised_mask();
        self.values.iter().zip(mask.iter()).map(|(v, m)| v * m).collect()
    }

    pub fn check_partition(&self) -> Result<()> {
        let mut covered = 0usize;
        let mut prev_end = 0usize;
        let mut sorted: Vec<&ParamGroup> = self.groups.iter().collect();
        sorted.sort_by_key(|g| g.start);
        for g in sorted {
            if g.start != prev_end {
                return Err(Error::Config(format!(
                    "group {} starts at {} but previous coverage ends at {}",
                    g.name, g.start, prev_end
                )));
            }
            prev_end = g.start + g.len;
            covered += g.len;
        }
        if covered != self.values.len() {
            return Err(Error::Config(format!(
                "groups cover {covered} entries but vector has {}",
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// Multiply the entries of normalised groups by k, leaving the rest bitwise
/// unchanged.
pub fn scale_group(params: &GroupedParams, k: f64) -> Result<GroupedParams> {
    if !(k > 0.0) {
        return Err(Error::NonPositiveScale { k });
    }
    let mut out = params.clone();
    for g in out.groups.iter().filter(|g| g.normalised) {
        for v in &mut out.values[g.range()] {
            *v *= k;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::{Activation, Architecture};

    fn arch() -> Architecture {
        Architecture::fully_normalised_mlp(1, &[4, 4], 1, Activation::LeakyRelu(0.01), true)
    }

    #[test]
    fn layout_partitions_vector() {
        let p = GroupedParams::layout(&arch());
        p.check_partition().unwrap();
        assert_eq!(p.dim(), arch().num_params());
        assert!(p.group("layer0.weight").unwrap().normalised);
        assert!(!p.group("final.weight").unwrap().normalised);
    }

    #[test]
    fn scale_group_identity_at_one() {
        let p = GroupedParams::init(&arch(), 3);
        let q = scale_group(&p, 1.0).unwrap();
        assert_eq!(p.values, q.values);
    }

    #[test]
    fn scale_group_leaves_non_normalised_bitwise() {
        let p = GroupedParams::init(&arch(), 3);
        let q = scale_group(&p, 0.5).unwrap();
        let fin = p.group("final.weight").unwrap().range();
        assert_eq!(&p.values[fin.clone()], &q.values[fin]);
        let l0 = p.group("layer0.weight").unwrap().range();
        for (a, b) in p.values[l0.clone()].iter().zip(q.values[l0].iter()) {
            assert_eq!(*b, *a * 0.5);
        }
    }

    #[test]
    fn scale_group_rejects_nonpositive() {
        let p = GroupedParams::init(&arch(), 3);
        assert!(scale_group(&p, 0.0).is_err());
        assert!(scale_group(&p, -2.0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = GroupedParams::init(&arch(), 9);
        let b = GroupedParams::init(&arch(), 9);
        assert_eq!(a.values, b.values);
    }
}
