//! Finite direction sets standing in for suprema over the unit sphere.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HptrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    Vector,
    SymmetricMatrix,
}

/// Everything needed to regenerate a net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    pub dim: usize,
    pub seed: u64,
    pub size: usize,
}

/// Unit vectors, or unit-Frobenius symmetric matrices flattened row-major.
/// Always closed under negation and always contains the signed canonical basis.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionNet {
    spec: NetSpec,
    elements: Vec<Vec<f64>>,
}

impl Serialize for DirectionNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.spec.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DirectionNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = NetSpec::deserialize(d)?;
        DirectionNet::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

impl DirectionNet {
    pub fn from_spec(spec: &NetSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(invalid("net dimension must be positive"));
        }
        let elements = match spec.kind {
            NetKind::Vector => vector_elements(spec.dim, spec.size, spec.seed),
            NetKind::SymmetricMatrix => symmetric_elements(spec.dim, spec.size, spec.seed),
        };
        Ok(DirectionNet { spec: spec.clone(), elements })
    }

    pub fn vectors(dim: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_spec(&NetSpec { kind: NetKind::Vector, dim, seed, size })
    }

    pub fn symmetric(dim: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_spec(&NetSpec { kind: NetKind::SymmetricMatrix, dim, seed, size })
    }

    /// Net with an extra direction and its negation appended (used to plant witnesses).
    pub fn with_direction(mut self, v: &[f64]) -> Result<Self> {
        let width = match self.spec.kind {
            NetKind::Vector => self.spec.dim,
            NetKind::SymmetricMatrix => self.spec.dim * self.spec.dim,
        };
        if v.len() != width {
            return Err(HptrError::Shape(format!("direction of length {} for width {width}", v.len())));
        }
        let v = normalize(v.to_vec()).ok_or_else(|| invalid("zero direction"))?;
        self.elements.push(neg(&v));
        self.elements.push(v);
        Ok(self)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn kind(&self) -> NetKind {
        self.spec.kind
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn elements(&self) -> &[Vec<f64>] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

fn vector_elements(d: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            // equally spaced angles; doubling the size refines the previous net
            let m = size.max(4).div_ceil(4) * 4;
            (0..m)
                .map(|j| {
                    if 4 * j % m != 0 {
                        let t = 2.0 * PI * j as f64 / m as f64;
                        return vec![t.cos(), t.sin()];
                    }
                    match 4 * j / m {
                        0 => vec![1.0, 0.0],
                        1 => vec![0.0, 1.0],
                        2 => vec![-1.0, 0.0],
                        _ => vec![0.0, -1.0],
                    }
                })
                .collect()
        }
        _ => {
            let mut out = Vec::new();
            for i in 0..d {
                out.push(unit(d, i));
                out.push(neg(&unit(d, i)));
            }
            let extra_pairs = size.saturating_sub(2 * d).div_ceil(2);
            if d == 3 {
                // Fibonacci lattice on the sphere, each point with its antipode
                let golden = PI * (3.0 - 5f64.sqrt());
                for k in 0..extra_pairs {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / extra_pairs as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    let v = vec![r * t.cos(), r * t.sin(), z];
                    out.push(neg(&v));
                    out.push(v);
                }
            } else {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                while out.len() < 2 * d + 2 * extra_pairs {
                    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    if let Some(v) = normalize(g) {
                        out.push(neg(&v));
                        out.push(v);
                    }
                }
            }
            out
        }
    }
}

fn symmetric_elements(d: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..d {
        for j in i..d {
            let mut m = vec![0.0; d * d];
            if i == j {
                m[d * i + i] = 1.0;
            } else {
                m[d * i + j] = s;
                m[d * j + i] = s;
            }
            out.push(neg(&m));
            out.push(m);
        }
    }
    let canonical = out.len();
    let extra_pairs = size.saturating_sub(canonical).div_ceil(2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    while out.len() < canonical + 2 * extra_pairs {
        let g: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut sym = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sym[d * i + j] = 0.5 * (g[d * i + j] + g[d * j + i]);
            }
        }
        if let Some(mut v) = normalize(sym) {
            // restore exact symmetry after rounding in the division
            for i in 0..d {
                for j in 0..i {
                    v[d * i + j] = v[d * j + i];
                }
            }
            out.push(neg(&v));
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn vector_nets_are_unit_symmetric_and_canonical() {
        for d in 1..=5 {
            let net = DirectionNet::vectors(d, 40, 7).unwrap();
            for v in net.elements() {
                assert!((norm(v) - 1.0).abs() < 1e-10);
                assert!(net.elements().iter().any(|w| w.iter().zip(v).all(|(a, b)| (a + b).abs() < 1e-12)));
            }
            for i in 0..d {
                assert!(net.elements().contains(&unit(d, i)));
                assert!(net.elements().contains(&neg(&unit(d, i))));
            }
        }
    }

    #[test]
    fn circle_nets_nest_under_doubling() {
        let small = DirectionNet::vectors(2, 16, 0).unwrap();
        let big = DirectionNet::vectors(2, 32, 0).unwrap();
        for v in small.elements() {
            assert!(big.elements().iter().any(|w| w.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-15)));
        }
    }

    #[test]
    fn symmetric_net_elements() {
        let net = DirectionNet::symmetric(3, 30, 11).unwrap();
        assert!(net.len() >= 30);
        for v in net.elements() {
            assert!((norm(v) - 1.0).abs() < 1e-10);
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(v[3 * i + j], v[3 * j + i]);
                }
            }
        }
    }

    #[test]
    fn json_regenerates_identically() {
        let net = DirectionNet::vectors(5, 24, 99).unwrap();
        let js = serde_json::to_string(&net).unwrap();
        assert_eq!(js, r#"{"kind":"vector","dim":5,"seed":99,"size":24}"#);
        let back: DirectionNet = serde_json::from_str(&js).unwrap();
        assert_eq!(back, net);
        let sym = DirectionNet::symmetric(2, 10, 3).unwrap();
        let back: DirectionNet = serde_json::from_str(&serde_json::to_string(&sym).unwrap()).unwrap();
        assert_eq!(back, sym);
    }
}
