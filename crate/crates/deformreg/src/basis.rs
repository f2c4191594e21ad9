//! Intensity basis functions: a small fully connected network mapping a
//! C-channel intensity vector to J basis values (the first pinned to the
//! constant 1), or a fixed multivariate polynomial alternative.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::tape::{NodeId, Tape};

const HIDDEN: usize = 32;
const INIT_CONDITION_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Learned,
    Polynomial,
}

/// Basis function model; `omega` is the flat parameter vector of the
/// learned network (empty for the polynomial kind).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisModel {
    pub kind: BasisKind,
    /// Number of basis functions J (>= 2).
    pub terms: usize,
    pub input_channels: usize,
    /// Polynomial total degree bound (polynomial kind only).
    pub degree: usize,
    pub omega: Vec<f64>,
    #[serde(skip)]
    exponents: Vec<Vec<u32>>,
}

/// All monomial exponent tuples with total degree <= `degree` over
/// `channels` variables, ordered by total degree then lexicographically;
/// the first tuple is the constant.
fn monomial_exponents(channels: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut stack = vec![(Vec::new(), total)];
        while let Some((prefix, remaining)) = stack.pop() {
            if prefix.len() == channels - 1 {
                let mut e = prefix.clone();
                e.push(remaining);
                out.push(e);
                continue;
            }
            // push in reverse so the pop order is lexicographic
            for v in (0..=remaining).rev() {
                let mut p = prefix.clone();
                p.push(v);
                stack.push((p, remaining - v));
            }
        }
    }
    out
}

impl BasisModel {
    /// Fixed polynomial basis of the given total degree. With one input
    /// channel this yields `degree + 1` terms `1, x, x^2, ...`.
    pub fn polynomial(degree: usize, input_channels: usize) -> Result<Self> {
        if degree < 1 || input_channels < 1 {
            return Err(Error::invalid(
                "polynomial basis requires degree >= 1 and at least one channel",
            ));
        }
        let exponents = monomial_exponents(input_channels, degree);
        Ok(BasisModel {
            kind: BasisKind::Polynomial,
            terms: exponents.len(),
            input_channels,
            degree,
            omega: Vec::new(),
            exponents,
        })
    }

    /// Seeded learned basis: input -> 32 -> 32 -> J-1 with SiLU
    /// activations, plus the pinned constant term. Initialization redraws
    /// until the J outputs are numerically independent (condition number
    /// of a 100 x J probe feature matrix below 1e6).
    pub fn init_learned(terms: usize, input_channels: usize, seed: u64) -> Result<Self> {
        if terms < 2 || input_channels < 1 {
            return Err(Error::invalid(
                "learned basis requires J >= 2 and at least one channel",
            ));
        }
        let mut model = BasisModel {
            kind: BasisKind::Learned,
            terms,
            input_channels,
            degree: 0,
            omega: Vec::new(),
            exponents: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _attempt in 0..64 {
            model.omega = model.draw_params(&mut rng);
            if model.init_condition_ok(seed) {
                return Ok(model);
            }
        }
        Err(Error::invalid(
            "could not initialize a well-conditioned basis network",
        ))
    }

    /// Layer shapes `(out, in)` of the learned network.
    fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (HIDDEN, self.input_channels),
            (HIDDEN, HIDDEN),
            (self.terms - 1, HIDDEN),
        ]
    }

    pub fn param_len(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial => 0,
            BasisKind::Learned => self
                .layer_dims()
                .iter()
                .map(|(o, i)| o * i + o)
                .sum(),
        }
    }

    fn draw_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        // wide first layer so the activations bend inside the normalized
        // [0, 1] intensity range; modest hidden and output scales
        let ranges = [(6.0, 3.0), (0.6, 0.5), (0.3, 0.0)];
        let mut omega = Vec::with_capacity(self.param_len());
        for ((out, inp), (ws, bs)) in self.layer_dims().iter().zip(ranges) {
            for _ in 0..out * inp {
                omega.push(rng.gen_range(-ws..ws));
            }
            for _ in 0..*out {
                omega.push(if bs > 0.0 { rng.gen_range(-bs..bs) } else { 0.0 });
            }
        }
        omega
    }

    fn init_condition_ok(&self, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = 100;
        let mut probe = Field::zeros(&[self.input_channels, n]);
        for v in probe.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let feats = self.eval(&probe).expect("probe evaluation");
        let m = DMatrix::<f64>::from_fn(n, self.terms, |r, c| feats.channel(c)[r]);
        let sv = m.svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        smin > 0.0 && smax / smin < INIT_CONDITION_LIMIT
    }

    /// Rebuilds the derived monomial table after deserialization.
    pub fn rebuild_cache(&mut self) {
        if self.kind == BasisKind::Polynomial {
            self.exponents = monomial_exponents(self.input_channels, self.degree);
        }
    }

    /// Registers the learned parameters as differentiable leaves on the
    /// tape (weight/bias per layer); empty for the polynomial kind.
    pub fn bind_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        if self.kind == BasisKind::Polynomial {
            return Vec::new();
        }
        let mut nodes = Vec::with_capacity(6);
        let mut offset = 0;
        for (out, inp) in self.layer_dims() {
            let w = Field::from_vec(&[out, inp], self.omega[offset..offset + out * inp].to_vec())
                .expect("weight shape");
            offset += out * inp;
            let b = Field::from_vec(&[out], self.omega[offset..offset + out].to_vec())
                .expect("bias shape");
            offset += out;
            nodes.push(tape.leaf(w));
            nodes.push(tape.leaf(b));
        }
        nodes
    }

    /// Builds the per-voxel feature node: `input` is `[c, n]`, the output
    /// is `[J, n]` with the constant-1 basis first. `params` must come
    /// from `bind_params` on the same tape (ignored for polynomial).
    pub fn features(&self, tape: &mut Tape, input: NodeId, params: &[NodeId]) -> NodeId {
        debug_assert_eq!(tape.value(input).shape()[0], self.input_channels);
        match self.kind {
            BasisKind::Polynomial => tape.poly_features(input, &self.exponents),
            BasisKind::Learned => {
                let mut x = input;
                for (layer, chunk) in params.chunks(2).enumerate() {
                    let h = tape.affine_map(x, chunk[0], chunk[1]);
                    x = if layer < 2 { tape.silu(h) } else { h };
                }
                tape.prepend_ones(x)
            }
        }
    }

    /// Accumulates the flat parameter gradient from a finished backward
    /// pass; zero-length for the polynomial kind.
    pub fn collect_grad(&self, grads: &mut crate::tape::Gradients, params: &[NodeId]) -> Vec<f64> {
        if self.kind == BasisKind::Polynomial {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.param_len());
        for ((outn, inp), chunk) in self.layer_dims().iter().zip(params.chunks(2)) {
            let w = grads.take(chunk[0], &[*outn, *inp]);
            out.extend_from_slice(w.data());
            let b = grads.take(chunk[1], &[*outn]);
            out.extend_from_slice(b.data());
        }
        out
    }

    /// Eager evaluation: `[c, n...]` intensities to `[J, n...]` features.
    pub fn eval(&self, intensities: &Field) -> Result<Field> {
        if intensities.shape()[0] != self.input_channels {
            return Err(Error::ShapeMismatch {
                what: "basis input channels",
                expected: vec![self.input_channels],
                found: vec![intensities.shape()[0]],
            });
        }
        if !intensities.all_finite() {
            return Err(Error::NonFinite("basis input".into()));
        }
        let spatial = intensities.shape()[1..].to_vec();
        let n = intensities.channel_len();
        let flat = intensities
            .clone()
            .reshape(&[self.input_channels, n])
            .expect("flatten");
        let mut tape = Tape::new();
        let input = tape.constant(flat);
        let params = self.bind_params(&mut tape);
        let node = self.features(&mut tape, input, &params);
        let out = tape.value(node).clone();
        out.reshape(&[&[self.terms], &spatial[..]].concat())
    }
}
