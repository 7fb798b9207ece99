//! Hybrid-shared convolution, gating and fully connected layers.
//!
//! A convolution layer mixes two kinds of feature maps over the same input
//! segments: Time-Flow maps share one weight matrix across all locations,
//! Time-Arrow maps have a separate weight slice per location. A gate layer
//! merges non-overlapping pairs of locations with a per-feature-map logistic
//! gate computed from the raw convolution *input* segments of the pair.
//!
//! Layer geometry lives in the `*Shape` types; weights are carried by the
//! generic `*Weights<T>` types so the same structure holds owned tensors,
//! parameter indices or tape handles.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Activation, Tensor};

/// Weight/bias pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub w: T,
    pub b: T,
}

impl<T> Affine<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> Affine<U> {
        Affine {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.w);
        f(&self.b);
    }
}

fn map_opt<'a, T, U>(a: &'a Option<Affine<T>>, f: &mut impl FnMut(&'a T) -> U) -> Option<Affine<U>> {
    a.as_ref().map(|a| a.map(f))
}

/// Soft (logistic) or hard (thresholded) gating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    Soft,
    Hard,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Soft => "soft",
            GateMode::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(GateMode::Soft),
            "hard" => Some(GateMode::Hard),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of one convolution layer (stride 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    /// Consecutive input positions per convolution unit.
    pub window: usize,
    pub d_in: usize,
    pub tf_maps: usize,
    pub ta_maps: usize,
    /// Output locations; the input must have `locations + window − 1` rows.
    pub locations: usize,
    pub activation: Activation,
}

/// Time-Flow weights `w[F_TF × k·d_in]`, `b[F_TF]`; Time-Arrow weights
/// `w[L × F_TA × k·d_in]`, `b[L × F_TA]`. Absent when the map count is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub tf: Option<Affine<T>>,
    pub ta: Option<Affine<T>>,
}

impl<T> ConvWeights<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> ConvWeights<U> {
        ConvWeights {
            tf: map_opt(&self.tf, f),
            ta: map_opt(&self.ta, f),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.tf.iter().chain(&self.ta).for_each(|a| a.for_each(f));
    }
}

/// Feature maps plus the input segments they were computed from.
#[derive(Clone, Copy, Debug)]
pub struct ConvOutput {
    /// `[L × (F_TF + F_TA)]`, Time-Flow columns first.
    pub maps: Var,
    /// `[L × k·d_in]`, row `i` is the concatenated input window at location `i`.
    pub segments: Var,
}

impl ConvShape {
    pub fn input_len(&self) -> usize {
        self.locations + self.window - 1
    }

    pub fn segment_width(&self) -> usize {
        self.window * self.d_in
    }

    pub fn out_maps(&self) -> usize {
        self.tf_maps + self.ta_maps
    }

    /// Creates the weight structure, calling `alloc(name, shape)` per tensor.
    pub fn allocate<T>(&self, prefix: &str, alloc: &mut impl FnMut(String, Vec<usize>) -> T) -> ConvWeights<T> {
        let m = self.segment_width();
        let tf = (self.tf_maps > 0).then(|| Affine {
            w: alloc(format!("{prefix}.tf.w"), vec![self.tf_maps, m]),
            b: alloc(format!("{prefix}.tf.b"), vec![self.tf_maps]),
        });
        let ta = (self.ta_maps > 0).then(|| Affine {
            w: alloc(format!("{prefix}.ta.w"), vec![self.locations, self.ta_maps, m]),
            b: alloc(format!("{prefix}.ta.b"), vec![self.locations, self.ta_maps]),
        });
        ConvWeights { tf, ta }
    }

    pub fn forward(&self, tape: &mut GradTape<'_>, w: &ConvWeights<Var>, input: Var) -> Result<ConvOutput> {
        let shape = tape.value(input).shape().to_vec();
        if shape != [self.input_len(), self.d_in] {
            return Err(Error::shape("conv_forward", &shape, &[self.input_len(), self.d_in]));
        }
        let segments = tape.im2col(input, self.window)?;
        let tf = match &w.tf {
            Some(a) => {
                let z = tape.matmul_bt(segments, a.w)?;
                Some(tape.add_bias(z, a.b)?)
            }
            None => None,
        };
        let ta = match &w.ta {
            Some(a) => {
                let z = tape.local_matvec(a.w, segments)?;
                Some(tape.add(z, a.b)?)
            }
            None => None,
        };
        let pre = match (tf, ta) {
            (Some(x), Some(y)) => tape.concat_cols(x, y)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => {
                return Err(Error::Contract("convolution layer has no feature maps".into()))
            }
        };
        let maps = tape.activation(pre, self.activation);
        Ok(ConvOutput { maps, segments })
    }
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

/// Geometry of the gate layer that follows a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateShape {
    /// Rows of the incoming feature maps.
    pub rows_in: usize,
    /// Width of one convolution input segment; gate inputs are two segments.
    pub segment_width: usize,
    pub tf_maps: usize,
    pub ta_maps: usize,
}

/// Time-Flow gates `w[F_TF × 2m]`, `b[F_TF]` shared by every window;
/// Time-Arrow gates `w[J × F_TA × 2m]`, `b[J × F_TA]`, one slice per window.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights<T> {
    pub tf: Option<Affine<T>>,
    pub ta: Option<Affine<T>>,
}

impl<T> GateWeights<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> GateWeights<U> {
        GateWeights {
            tf: map_opt(&self.tf, f),
            ta: map_opt(&self.ta, f),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.tf.iter().chain(&self.ta).for_each(|a| a.for_each(f));
    }
}

impl GateShape {
    pub fn after(conv: &ConvShape) -> Self {
        GateShape {
            rows_in: conv.locations,
            segment_width: conv.segment_width(),
            tf_maps: conv.tf_maps,
            ta_maps: conv.ta_maps,
        }
    }

    /// Number of gated windows `J = ⌊L/2⌋`.
    pub fn windows(&self) -> usize {
        self.rows_in / 2
    }

    pub fn rows_out(&self) -> usize {
        self.rows_in.div_ceil(2)
    }

    pub fn allocate<T>(&self, prefix: &str, alloc: &mut impl FnMut(String, Vec<usize>) -> T) -> GateWeights<T> {
        let j = self.windows();
        let m2 = 2 * self.segment_width;
        let tf = (j > 0 && self.tf_maps > 0).then(|| Affine {
            w: alloc(format!("{prefix}.tf.w"), vec![self.tf_maps, m2]),
            b: alloc(format!("{prefix}.tf.b"), vec![self.tf_maps]),
        });
        let ta = (j > 0 && self.ta_maps > 0).then(|| Affine {
            w: alloc(format!("{prefix}.ta.w"), vec![j, self.ta_maps, m2]),
            b: alloc(format!("{prefix}.ta.b"), vec![j, self.ta_maps]),
        });
        GateWeights { tf, ta }
    }

    /// Gate values `g[J × F]` for the left element of each window.
    pub fn gates(&self, tape: &mut GradTape<'_>, w: &GateWeights<Var>, segments: Var) -> Result<Var> {
        let merged = tape.pair_rows(segments)?;
        let tf = match &w.tf {
            Some(a) => {
                let z = tape.matmul_bt(merged, a.w)?;
                Some(tape.add_bias(z, a.b)?)
            }
            None => None,
        };
        let ta = match &w.ta {
            Some(a) => {
                let z = tape.local_matvec(a.w, merged)?;
                Some(tape.add(z, a.b)?)
            }
            None => None,
        };
        let logits = match (tf, ta) {
            (Some(x), Some(y)) => tape.concat_cols(x, y)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => return Err(Error::Contract("gate layer has no weights".into())),
        };
        Ok(tape.activation(logits, Activation::Sigmoid))
    }

    /// `out[j] = g·maps[2j] + (1−g)·maps[2j+1]` per feature map; an unpaired
    /// last row passes through.
    pub fn forward(
        &self,
        tape: &mut GradTape<'_>,
        w: &GateWeights<Var>,
        conv: &ConvOutput,
        mode: GateMode,
    ) -> Result<Var> {
        let (rows, f) = tape.value(conv.maps).dims2()?;
        if rows != self.rows_in || f != self.tf_maps + self.ta_maps {
            return Err(Error::shape(
                "gate_forward",
                &[rows, f],
                &[self.rows_in, self.tf_maps + self.ta_maps],
            ));
        }
        if self.windows() == 0 {
            return Ok(conv.maps);
        }
        let g = self.gates(tape, w, conv.segments)?;
        let g = match mode {
            GateMode::Soft => g,
            GateMode::Hard => tape.hard_threshold(g),
        };
        tape.gate_mix(conv.maps, g)
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcShape {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl FcShape {
    pub fn allocate<T>(&self, prefix: &str, alloc: &mut impl FnMut(String, Vec<usize>) -> T) -> Affine<T> {
        Affine {
            w: alloc(format!("{prefix}.w"), vec![self.d_out, self.d_in]),
            b: alloc(format!("{prefix}.b"), vec![self.d_out]),
        }
    }

    /// `σ(w·x + b)` for `x` of any shape with `d_in` elements; returns `[1 × d_out]`.
    pub fn forward(&self, tape: &mut GradTape<'_>, w: &Affine<Var>, input: Var) -> Result<Var> {
        let n = tape.value(input).len();
        if n != self.d_in {
            return Err(Error::shape("fc_forward", &[n], &[self.d_in]));
        }
        let row = tape.reshape(input, &[1, self.d_in])?;
        let z = tape.matmul_bt(row, w.w)?;
        let z = tape.add_bias(z, w.b)?;
        Ok(tape.activation(z, self.activation))
    }
}

// ---------------------------------------------------------------------------
// Standalone, tensor-in/tensor-out entry points
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams {
    pub shape: ConvShape,
    pub weights: ConvWeights<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateLayerParams {
    pub shape: GateShape,
    pub weights: GateWeights<Tensor>,
    pub mode: GateMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcLayerParams {
    pub shape: FcShape,
    pub weights: Affine<Tensor>,
}

/// Result of a standalone convolution: feature maps and input segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvResult {
    pub maps: Tensor,
    pub segments: Tensor,
}

impl ConvLayerParams {
    pub fn zeros(shape: ConvShape) -> Self {
        let weights = shape.allocate("conv", &mut |_, s| Tensor::zeros(&s));
        ConvLayerParams { shape, weights }
    }

    pub fn forward(&self, input: &Tensor) -> Result<ConvResult> {
        let mut tape = GradTape::new();
        let w = self.weights.map(&mut |t| tape.param(t));
        let x = tape.param(input);
        let out = self.shape.forward(&mut tape, &w, x)?;
        Ok(ConvResult {
            maps: tape.value(out.maps).clone(),
            segments: tape.value(out.segments).clone(),
        })
    }
}

impl GateLayerParams {
    pub fn zeros(shape: GateShape, mode: GateMode) -> Self {
        let weights = shape.allocate("gate", &mut |_, s| Tensor::zeros(&s));
        GateLayerParams { shape, weights, mode }
    }

    pub fn forward(&self, conv: &ConvResult) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let w = self.weights.map(&mut |t| tape.param(t));
        let out = ConvOutput {
            maps: tape.param(&conv.maps),
            segments: tape.param(&conv.segments),
        };
        let y = self.shape.forward(&mut tape, &w, &out, self.mode)?;
        Ok(tape.value(y).clone())
    }
}

impl FcLayerParams {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let w = self.weights.map(&mut |t| tape.param(t));
        let x = tape.param(input);
        let y = self.shape.forward(&mut tape, &w, x)?;
        tape.value(y).reshape(&[self.shape.d_out])
    }
}
