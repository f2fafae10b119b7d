//! Dense tensors and a small reverse-mode autodiff graph.
//!
//! The graph covers exactly the primitives a residual MLP classifier needs:
//! fused dense layers (matmul + bias) reading from a flat parameter vector,
//! ReLU, residual addition, and a numerically stable row-wise log-softmax.
//! Forward caches every intermediate; backward walks the node list in exact
//! reverse order and accumulates parameter gradients into a flat view.

use crate::error::{DcaError, Result};

/// Dense n-dimensional array of f64 in row-major order, with an optional
/// gradient slot of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DcaError::Dimension(format!(
                "tensor shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    /// 2-D constructor used for batches: `rows x cols`, row-major.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            0
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-wise numerically stable softmax (max-subtraction before exp).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape.len() != 2 || logits.shape[1] < 2 {
        return Err(DcaError::Dimension(format!(
            "softmax expects [batch, C>=2], got {:?}",
            logits.shape
        )));
    }
    if !logits.is_finite() {
        return Err(DcaError::Numeric("softmax input contains NaN/Inf".into()));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    let mut out = vec![0.0; b * c];
    for r in 0..b {
        let row = &logits.data[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            out[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[r * c + j] /= sum;
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Row-wise log-softmax: `x - max - ln(sum exp(x - max))`.
pub fn log_softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..cols {
            out[r * cols + j] = row[j] - m - lse;
        }
    }
    out
}

/// One primitive in the compute graph. Node inputs always refer to earlier
/// indices, so the list order is a topological order.
#[derive(Debug, Clone)]
pub enum Op {
    /// The batch input, shape `[batch, input_dim]`.
    Input,
    /// Fused dense layer reading interleaved `[w_row | bias]` blocks from the
    /// flat parameter vector: `out[b,j] = bias_j + sum_i x[b,i] * w[j,i]`.
    Dense { input: usize, offset: usize, in_dim: usize, out_dim: usize },
    Relu { input: usize },
    /// Elementwise residual addition of two same-shape activations.
    Add { lhs: usize, rhs: usize },
    /// Row-wise log-softmax over the class dimension.
    LogSoftmax { input: usize },
}

#[derive(Debug)]
struct ForwardCache {
    values: Vec<Tensor>,
    params: Vec<f64>,
    batch: usize,
}

/// Reusable computation template. `forward` binds a parameter vector and an
/// input batch, caching intermediates; `backward` consumes the cache and
/// yields the gradient w.r.t. the flat parameter vector.
#[derive(Debug)]
pub struct ComputeGraph {
    ops: Vec<Op>,
    input_dim: usize,
    param_count: usize,
    cache: Option<ForwardCache>,
}

impl ComputeGraph {
    /// Assemble a graph from an explicit op list. The last op is the output.
    pub fn from_ops(ops: Vec<Op>, input_dim: usize, param_count: usize) -> Result<Self> {
        if ops.is_empty() {
            return Err(DcaError::Config("compute graph needs at least one op".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            let inputs: Vec<usize> = match op {
                Op::Input => vec![],
                Op::Dense { input, .. } | Op::Relu { input } | Op::LogSoftmax { input } => {
                    vec![*input]
                }
                Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            };
            if inputs.iter().any(|&j| j >= i) {
                return Err(DcaError::Config(format!(
                    "op {} refers to node not before it (graph must be topological)",
                    i
                )));
            }
            if let Op::Dense { offset, in_dim, out_dim, .. } = op {
                let need = offset + out_dim * (in_dim + 1);
                if need > param_count {
                    return Err(DcaError::Config(format!(
                        "dense op {} needs parameter slots up to {}, graph declares {}",
                        i, need, param_count
                    )));
                }
            }
        }
        Ok(ComputeGraph { ops, input_dim, param_count, cache: None })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Run the graph on `input` with the given flat parameters. Returns the
    /// output of the final node (for classifier graphs: log-probabilities of
    /// shape `[batch, C]`). All intermediates are cached for `backward`.
    pub fn forward(&mut self, params: &[f64], input: &Tensor) -> Result<Tensor> {
        if params.len() != self.param_count {
            return Err(DcaError::Dimension(format!(
                "graph declares {} parameter slots, got {}",
                self.param_count,
                params.len()
            )));
        }
        if input.shape.len() != 2 || input.shape[1] != self.input_dim {
            return Err(DcaError::Dimension(format!(
                "graph input is [batch, {}], got {:?}",
                self.input_dim, input.shape
            )));
        }
        if !input.is_finite() {
            return Err(DcaError::Numeric("graph input contains NaN/Inf".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(DcaError::Numeric("graph parameters contain NaN/Inf".into()));
        }
        let batch = input.shape[0];
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let out = match op {
                Op::Input => input.clone(),
                Op::Dense { input, offset, in_dim, out_dim } => {
                    let x = &values[*input];
                    if x.cols() != *in_dim {
                        return Err(DcaError::Dimension(format!(
                            "dense layer expects {} input features, got {}",
                            in_dim,
                            x.cols()
                        )));
                    }
                    let mut out = vec![0.0; batch * out_dim];
                    let stride = in_dim + 1;
                    for b in 0..batch {
                        let xr = x.row(b);
                        let orow = &mut out[b * out_dim..(b + 1) * out_dim];
                        for j in 0..*out_dim {
                            let w = &params[offset + j * stride..offset + j * stride + in_dim];
                            let bias = params[offset + j * stride + in_dim];
                            let mut acc = bias;
                            for i in 0..*in_dim {
                                acc += xr[i] * w[i];
                            }
                            orow[j] = acc;
                        }
                    }
                    Tensor::new(vec![batch, *out_dim], out)?
                }
                Op::Relu { input } => {
                    let x = &values[*input];
                    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    Tensor::new(x.shape.clone(), data)?
                }
                Op::Add { lhs, rhs } => {
                    let (a, b) = (&values[*lhs], &values[*rhs]);
                    if a.shape != b.shape {
                        return Err(DcaError::Dimension(format!(
                            "residual add on mismatched shapes {:?} vs {:?}",
                            a.shape, b.shape
                        )));
                    }
                    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape.clone(), data)?
                }
                Op::LogSoftmax { input } => {
                    let x = &values[*input];
                    let data = log_softmax_rows(&x.data, x.rows(), x.cols());
                    Tensor::new(x.shape.clone(), data)?
                }
            };
            values.push(out);
        }
        let output = values.last().unwrap().clone();
        if !output.is_finite() {
            self.cache = None;
            return Err(DcaError::Numeric("forward produced NaN/Inf output".into()));
        }
        self.cache = Some(ForwardCache { values, params: params.to_vec(), batch });
        Ok(output)
    }

    /// Reverse pass. `output_grad` is dLoss/d(output of the final node); for
    /// a scalar loss seeded with 1.0 this is the loss gradient w.r.t. the
    /// cached log-probabilities. Returns dLoss/dparams as a flat vector.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| DcaError::State("backward called before forward".into()))?;
        let last = self.ops.len() - 1;
        if output_grad.shape != cache.values[last].shape {
            return Err(DcaError::Dimension(format!(
                "output grad shape {:?} does not match output {:?}",
                output_grad.shape, cache.values[last].shape
            )));
        }
        let mut grads: Vec<Vec<f64>> =
            cache.values.iter().map(|v| vec![0.0; v.numel()]).collect();
        grads[last].copy_from_slice(&output_grad.data);
        let mut param_grad = vec![0.0; self.param_count];
        let batch = cache.batch;

        for idx in (0..self.ops.len()).rev() {
            match &self.ops[idx] {
                Op::Input => {}
                Op::Dense { input, offset, in_dim, out_dim } => {
                    let g = std::mem::take(&mut grads[idx]);
                    let x = &cache.values[*input];
                    let stride = in_dim + 1;
                    let dx = &mut grads[*input];
                    for b in 0..batch {
                        let grow = &g[b * out_dim..(b + 1) * out_dim];
                        let xr = x.row(b);
                        for j in 0..*out_dim {
                            let gj = grow[j];
                            if gj == 0.0 {
                                continue;
                            }
                            let wbase = offset + j * stride;
                            let dwrow = &mut param_grad[wbase..wbase + in_dim];
                            for i in 0..*in_dim {
                                dwrow[i] += gj * xr[i];
                            }
                            param_grad[wbase + in_dim] += gj;
                            let w = &cache.params[wbase..wbase + in_dim];
                            let dxr = &mut dx[b * in_dim..(b + 1) * in_dim];
                            for i in 0..*in_dim {
                                dxr[i] += gj * w[i];
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let g = std::mem::take(&mut grads[idx]);
                    let x = &cache.values[*input];
                    let dx = &mut grads[*input];
                    for (i, &gv) in g.iter().enumerate() {
                        if x.data[i] > 0.0 {
                            dx[i] += gv;
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    let g = std::mem::take(&mut grads[idx]);
                    if lhs == rhs {
                        for (i, &gv) in g.iter().enumerate() {
                            grads[*lhs][i] += 2.0 * gv;
                        }
                    } else {
                        for (i, &gv) in g.iter().enumerate() {
                            grads[*lhs][i] += gv;
                        }
                        for (i, &gv) in g.iter().enumerate() {
                            grads[*rhs][i] += gv;
                        }
                    }
                }
                Op::LogSoftmax { input } => {
                    // d/dlogit_j = g_j - p_j * sum_k g_k  (per row)
                    let g = std::mem::take(&mut grads[idx]);
                    let out = &cache.values[idx];
                    let cols = out.cols();
                    let dx = &mut grads[*input];
                    for b in 0..batch {
                        let grow = &g[b * cols..(b + 1) * cols];
                        let orow = out.row(b);
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..cols {
                            dx[b * cols + j] += grow[j] - orow[j].exp() * gsum;
                        }
                    }
                }
            }
        }
        if param_grad.iter().any(|v| !v.is_finite()) {
            return Err(DcaError::Numeric("backward produced NaN/Inf gradients".into()));
        }
        Ok(param_grad)
    }

    /// Whether a forward pass has been run and its cache is available.
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_weight_dense_gives_zero_logits() {
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::Dense { input: 0, offset: 0, in_dim: 2, out_dim: 3 }],
            2,
            9,
        )
        .unwrap();
        let x = Tensor::from_rows(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let out = g.forward(&vec![0.0; 9], &x).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        // 2x2 identity weights, zero bias, interleaved [w00 w01 b0 w10 w11 b1]
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::Dense { input: 0, offset: 0, in_dim: 2, out_dim: 2 }],
            2,
            6,
        )
        .unwrap();
        let x = Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap();
        let out = g.forward(&params, &x).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0]);
    }

    #[test]
    fn two_layer_mlp_matches_straight_line_reimplementation() {
        // Independent straight-line evaluation of a 2-layer MLP with fixed
        // pseudo-random weights, against the graph execution.
        let in_dim = 3;
        let hid = 4;
        let out_dim = 2;
        let n_params = hid * (in_dim + 1) + out_dim * (hid + 1);
        let params: Vec<f64> = (0..n_params)
            .map(|i| (i as f64 * 0.7391 + 0.13).sin() * 0.9)
            .collect();
        let x = vec![0.2, -1.3, 0.8, 1.1, 0.4, -0.6];

        let mut g = ComputeGraph::from_ops(
            vec![
                Op::Input,
                Op::Dense { input: 0, offset: 0, in_dim, out_dim: hid },
                Op::Relu { input: 1 },
                Op::Dense { input: 2, offset: hid * (in_dim + 1), in_dim: hid, out_dim },
            ],
            in_dim,
            n_params,
        )
        .unwrap();
        let out = g
            .forward(&params, &Tensor::from_rows(2, in_dim, x.clone()).unwrap())
            .unwrap();

        // straight-line re-evaluation
        for b in 0..2 {
            let xr = &x[b * in_dim..(b + 1) * in_dim];
            let mut h = vec![0.0; hid];
            for j in 0..hid {
                let base = j * (in_dim + 1);
                let mut acc = params[base + in_dim];
                for i in 0..in_dim {
                    acc += xr[i] * params[base + i];
                }
                h[j] = acc.max(0.0);
            }
            for j in 0..out_dim {
                let base = hid * (in_dim + 1) + j * (hid + 1);
                let mut acc = params[base + hid];
                for i in 0..hid {
                    acc += h[i] * params[base + i];
                }
                assert!(
                    close(out.data[b * out_dim + j], acc, 1e-12),
                    "graph {} vs manual {}",
                    out.data[b * out_dim + j],
                    acc
                );
            }
        }
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum of dense outputs => dW[j,i] = sum_b x[b,i], db_j = batch
        let in_dim = 3;
        let out_dim = 2;
        let params = vec![0.1; out_dim * (in_dim + 1)];
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::Dense { input: 0, offset: 0, in_dim, out_dim }],
            in_dim,
            params.len(),
        )
        .unwrap();
        let x = Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        g.forward(&params, &x).unwrap();
        let ones = Tensor::from_rows(2, 2, vec![1.0; 4]).unwrap();
        let pg = g.backward(&ones).unwrap();
        let col_sum = [5.0, 7.0, 9.0];
        for j in 0..out_dim {
            let base = j * (in_dim + 1);
            for i in 0..in_dim {
                assert_eq!(pg[base + i], col_sum[i]);
            }
            assert_eq!(pg[base + in_dim], 2.0);
        }
    }

    #[test]
    fn graph_without_parameters_on_path_gets_zero_grads() {
        // param slots declared but no dense op: all parameter grads stay zero
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::LogSoftmax { input: 0 }],
            3,
            5,
        )
        .unwrap();
        let x = Tensor::from_rows(1, 3, vec![0.3, -0.4, 1.0]).unwrap();
        g.forward(&vec![0.5; 5], &x).unwrap();
        let seed = Tensor::from_rows(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let pg = g.backward(&seed).unwrap();
        assert!(pg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::Dense { input: 0, offset: 0, in_dim: 2, out_dim: 2 }],
            2,
            6,
        )
        .unwrap();
        let seed = Tensor::from_rows(1, 2, vec![1.0, 1.0]).unwrap();
        match g.backward(&seed) {
            Err(DcaError::State(_)) => {}
            other => panic!("expected state error, got {:?}", other),
        }
    }

    #[test]
    fn forward_shape_mismatch_is_dimension_error() {
        let mut g = ComputeGraph::from_ops(
            vec![Op::Input, Op::Dense { input: 0, offset: 0, in_dim: 2, out_dim: 2 }],
            2,
            6,
        )
        .unwrap();
        let x = Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(g.forward(&vec![0.0; 6], &x), Err(DcaError::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::from_rows(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&t).unwrap();
        for &v in &p.data {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let t = Tensor::from_rows(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = softmax(&t).unwrap();
        assert!(p.is_finite());
        assert!(close(p.data[0], 1.0, 1e-12));
        assert!(p.data[1] >= 0.0 && p.data[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // exp(1), exp(2), exp(3) evaluated in extended precision offline:
        // p = (0.09003057317038046, 0.24472847105479767, 0.6652409557748219)
        let t = Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&t).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, e) in p.data.iter().zip(expect) {
            assert!(close(*a, e, 1e-15), "{} vs {}", a, e);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let t = Tensor::from_rows(2, 4, vec![0.3, -1.2, 2.2, 0.9, -5.0, 1.0, 0.0, 3.3]).unwrap();
        let p = softmax(&t).unwrap();
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!(close(s, 1.0, 1e-12));
        }
        let shifted =
            Tensor::from_rows(2, 4, t.data.iter().map(|v| v + 7.5).collect()).unwrap();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let in_dim = 2;
        let params: Vec<f64> = (0..12).map(|i| (i as f64 * 1.17 - 3.0).cos()).collect();
        let ops = vec![
            Op::Input,
            Op::Dense { input: 0, offset: 0, in_dim, out_dim: 2 },
            Op::Relu { input: 1 },
            Op::Dense { input: 2, offset: 6, in_dim: 2, out_dim: 2 },
            Op::LogSoftmax { input: 3 },
        ];
        let x = Tensor::from_rows(2, 2, vec![0.1, -0.2, 0.7, 0.9]).unwrap();
        let seed = Tensor::from_rows(2, 2, vec![0.25, -0.5, 1.0, 0.0]).unwrap();

        let mut g1 = ComputeGraph::from_ops(ops.clone(), in_dim, 12).unwrap();
        let o1 = g1.forward(&params, &x).unwrap();
        let pg1 = g1.backward(&seed).unwrap();
        let mut g2 = ComputeGraph::from_ops(ops, in_dim, 12).unwrap();
        let o2 = g2.forward(&params, &x).unwrap();
        let pg2 = g2.backward(&seed).unwrap();

        assert_eq!(o1.data, o2.data);
        assert_eq!(pg1, pg2);
    }
}
