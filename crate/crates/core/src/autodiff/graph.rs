use crate::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward step: reads node values and the output gradient, accumulates
/// into input gradients. Gradients are addressed by node id.
pub(crate) type BackFn = Box<dyn Fn(&[Tensor], &mut [Option<Tensor>])>;

/// Reverse-mode tape. Ops append nodes in execution order, so ids are
/// already topologically sorted; the backward pass walks them once in
/// reverse.
///
/// Gradients are retained for leaves only; repeated calls to
/// [`Graph::backward`] accumulate into them.
pub struct Graph {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    is_leaf: Vec<bool>,
    backs: Vec<Option<BackFn>>,
    leaf_grads: Vec<Option<Tensor>>,
    scalar64: Vec<Option<f64>>,
    recording: bool,
    check_finite: bool,
    last_visits: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph for training: backward steps are kept.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            requires: Vec::new(),
            is_leaf: Vec::new(),
            backs: Vec::new(),
            leaf_grads: Vec::new(),
            scalar64: Vec::new(),
            recording: true,
            check_finite: cfg!(debug_assertions),
            last_visits: 0,
        }
    }

    /// Non-recording graph for inference: no backward steps, no gradients.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.recording = false;
        g
    }

    /// Toggle the NaN/Inf check that runs after every op (on by default in
    /// debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.requires.push(requires_grad && self.recording);
        self.is_leaf.push(true);
        self.backs.push(None);
        self.leaf_grads.push(None);
        self.scalar64.push(None);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// True when an op over `inputs` must record a backward step.
    pub(crate) fn wants_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.requires[v.0])
    }

    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        back: Option<BackFn>,
    ) -> Result<Var> {
        if self.check_finite {
            if let Some(bad) = value.first_non_finite() {
                return Err(Error::NonFinite(format!("{op} (value {bad})")));
            }
        }
        let requires = self.wants_grad(inputs);
        let id = self.values.len();
        self.values.push(value);
        self.requires.push(requires);
        self.is_leaf.push(false);
        self.backs.push(if requires { back } else { None });
        self.leaf_grads.push(None);
        self.scalar64.push(None);
        Ok(Var(id))
    }

    /// Record the 64-bit value of a scalar-producing reduction, kept
    /// alongside the 32-bit tensor so finite-difference checks can read
    /// the accumulator before the final cast.
    pub(crate) fn set_scalar64(&mut self, v: Var, value: f64) {
        self.scalar64[v.0] = Some(value);
    }

    /// 64-bit value of a reduction node, when the op recorded one.
    pub fn scalar_value_f64(&self, v: Var) -> Option<f64> {
        self.scalar64[v.0]
    }

    /// Number of backward steps executed by the most recent
    /// [`Graph::backward`] call.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    pub(crate) fn node_count(&self) -> usize {
        self.values.len()
    }

    /// Propagate d(loss)/d(node) to every leaf that requires a gradient.
    /// `loss` must be scalar. Each node's backward step runs at most once,
    /// in reverse topological (= reverse creation) order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        if !self.recording {
            return Err(Error::InvalidConfig("backward on a non-recording graph".into()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        self.last_visits = 0;
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                back(&self.values, &mut grads);
                self.last_visits += 1;
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), true, true) = (g, self.is_leaf[id], self.requires[id]) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `contrib` into a gradient slot, allocating zeros on first use.
pub(crate) fn accum_with(
    slot: &mut Option<Tensor>,
    shape: &[usize],
    f: impl FnOnce(&mut [f32]),
) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

/// Take the output gradient out of the slot table for the duration of a
/// backward step (output id is always greater than any input id).
pub(crate) fn take_grad(grads: &mut [Option<Tensor>], out: usize) -> Tensor {
    grads[out].take().expect("output gradient present")
}

pub(crate) fn put_grad(grads: &mut [Option<Tensor>], out: usize, g: Tensor) {
    grads[out] = Some(g);
}

impl Graph {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;

        let back = self.wants_grad(&[a, b]).then(|| {
            let shape = ta.shape().to_vec();
            let out = self.values.len();
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            Box::new(move |_values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                if ra {
                    accum_with(&mut grads[a.0], &shape, |d| {
                        for (o, &gi) in d.iter_mut().zip(g.data()) {
                            *o += gi;
                        }
                    });
                }
                if rb {
                    accum_with(&mut grads[b.0], &shape, |d| {
                        for (o, &gi) in d.iter_mut().zip(g.data()) {
                            *o += gi;
                        }
                    });
                }
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("add", value, &[a, b], back)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;

        let back = self.wants_grad(&[a, b]).then(|| {
            let shape = ta.shape().to_vec();
            let out = self.values.len();
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                if ra {
                    accum_with(&mut grads[a.0], &shape, |d| {
                        for ((o, &gi), &bv) in d.iter_mut().zip(g.data()).zip(values[b.0].data()) {
                            *o += gi * bv;
                        }
                    });
                }
                if rb {
                    accum_with(&mut grads[b.0], &shape, |d| {
                        for ((o, &gi), &av) in d.iter_mut().zip(g.data()).zip(values[a.0].data()) {
                            *o += gi * av;
                        }
                    });
                }
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("mul", value, &[a, b], back)
    }

    /// Sum of all elements (64-bit accumulation), as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.values[x.0].data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar(total as f32);
        let total64 = total;

        let back = self.wants_grad(&[x]).then(|| {
            let shape = self.values[x.0].shape().to_vec();
            let out = self.values.len();
            Box::new(move |_values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                let gv = g.data()[0];
                accum_with(&mut grads[x.0], &shape, |d| {
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                });
                put_grad(grads, out, g);
            }) as BackFn
        });
        let v = self.push_op("sum", value, &[x], back)?;
        self.set_scalar64(v, total64);
        Ok(v)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| c * v).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;

        let back = self.wants_grad(&[x]).then(|| {
            let shape = t.shape().to_vec();
            let out = self.values.len();
            Box::new(move |_values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                accum_with(&mut grads[x.0], &shape, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                });
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("scale", value, &[x], back)
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;

        let back = self.wants_grad(&[x]).then(|| {
            let shape = t.shape().to_vec();
            let out = self.values.len();
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                accum_with(&mut grads[x.0], &shape, |d| {
                    for ((o, &gi), &xv) in d.iter_mut().zip(g.data()).zip(values[x.0].data()) {
                        if xv > 0.0 {
                            *o += gi;
                        }
                    }
                });
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("relu", value, &[x], back)
    }

    /// Concatenate two 5-d tensors along the channel axis, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, d, h, w] = self.values[a.0].dims5()?;
        let [nb, cb, db, hb, wb] = self.values[b.0].dims5()?;
        if (na, d, h, w) != (nb, db, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat non-channel extents differ: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let spatial = d * h * w;
        let (block_a, block_b) = (ca * spatial, cb * spatial);
        let mut data = Vec::with_capacity(na * (block_a + block_b));
        for n in 0..na {
            data.extend_from_slice(&self.values[a.0].data()[n * block_a..(n + 1) * block_a]);
            data.extend_from_slice(&self.values[b.0].data()[n * block_b..(n + 1) * block_b]);
        }
        let value = Tensor::new(vec![na, ca + cb, d, h, w], data)?;

        let back = self.wants_grad(&[a, b]).then(|| {
            let out = self.values.len();
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            let shape_a = self.values[a.0].shape().to_vec();
            let shape_b = self.values[b.0].shape().to_vec();
            Box::new(move |_values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                let block = block_a + block_b;
                if ra {
                    accum_with(&mut grads[a.0], &shape_a, |d| {
                        for n in 0..na {
                            let src = &g.data()[n * block..n * block + block_a];
                            for (o, &gi) in d[n * block_a..(n + 1) * block_a].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    });
                }
                if rb {
                    accum_with(&mut grads[b.0], &shape_b, |d| {
                        for n in 0..na {
                            let src = &g.data()[n * block + block_a..(n + 1) * block];
                            for (o, &gi) in d[n * block_b..(n + 1) * block_b].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    });
                }
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("concat", value, &[a, b], back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let unused = g.leaf(Tensor::new(vec![3], vec![5.0; 3]).unwrap(), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        // Never reached by a backward step: grad stays absent (== all zero).
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap(), true);
        let r = g.relu(x).unwrap();
        let m = g.mul(r, r).unwrap();
        let a = g.add(m, r).unwrap();
        let loss = g.sum(a).unwrap();
        g.backward(loss).unwrap();
        // Four non-leaf nodes, each visited exactly once.
        assert_eq!(g.last_backward_visits(), 4);
    }

    #[test]
    fn relu_values_and_gradient_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_places_a_channels_first() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::filled(&[1, 3, 1, 1, 2], 1.0), false);
        let b = g.leaf(Tensor::filled(&[1, 5, 1, 1, 2], 2.0), false);
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 8, 1, 1, 2]);
        assert_eq!(&g.value(c).data()[..6], &[1.0; 6]);
        assert_eq!(&g.value(c).data()[6..], &[2.0; 10]);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::filled(&[1, 3, 2, 2, 2], 0.0), false);
        let b = g.leaf(Tensor::filled(&[1, 3, 2, 2, 3], 0.0), false);
        assert!(g.concat(a, b).is_err());
    }

    #[test]
    fn finite_check_trips_on_inf() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.leaf(Tensor::new(vec![1], vec![f32::MAX]).unwrap(), false);
        let sq = g.mul(x, x); // overflows to +inf
        assert!(matches!(sq, Err(Error::NonFinite(_))));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        assert!(g.backward(y).is_err());
    }
}
