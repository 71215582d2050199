//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes. Node ids are handed out
//! in execution order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Only the primitives the
//! transforms, the classifier and the attack losses need are provided.
//!
//! Broadcasting is limited to a one-element operand in the binary
//! elementwise ops; biases get their own dedicated primitives.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes run on the current thread so far.
pub fn backward_passes() -> u64 {
    BACKWARD_PASSES.with(Cell::get)
}

/// Elementwise primitive codes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Negate,
    Exp,
    Log,
    /// Zero gradient everywhere.
    Sign,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        code: Elementwise,
        a: usize,
        b: usize,
    },
    Unary {
        code: Elementwise,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
    },
    ChannelBias {
        x: usize,
        bias: usize,
    },
    RowBias {
        x: usize,
        bias: usize,
    },
    Pad2d {
        x: usize,
        pad: usize,
    },
    Slice2d {
        x: usize,
        row: usize,
        col: usize,
    },
    FlipWidth {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    /// Mean (`mean = true`) or per-row cross entropy; `probs` is the softmax.
    CrossEntropy {
        scores: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        mean: bool,
    },
    Dlr {
        scores: usize,
        rows: Vec<DlrRow>,
    },
}

#[derive(Debug, Clone, Copy)]
struct DlrRow {
    label: usize,
    target: usize,
    first: usize,
    third: usize,
    numerator: f64,
    denominator: f64,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Single-owner record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

/// `c = a·b (+ beta·c)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out[y, x] += Σ taps[ky, kx] · src[y + ky - r, x + kx - r]` with zero padding.
fn shifted_axpy(src: &[f64], taps: &[f64], h: usize, w: usize, k: usize, out: &mut [f64]) {
    let half = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - half;
        let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize).max(0) as usize);
        for kx in 0..k {
            let t = taps[ky * k + kx];
            let dx = kx as isize - half;
            let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                let o = &mut out[y * w + x0..y * w + x1];
                for (d, s) in o.iter_mut().zip(&src[s0..s0 + (x1 - x0)]) {
                    *d += t * s;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the planes.
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let half = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - half;
            let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize).max(0) as usize);
            for kx in 0..k {
                let dx = kx as isize - half;
                let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
                if x0 >= x1 {
                    continue;
                }
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                    for (d, v) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// The `[C·k·k, H·W]` patch matrix of one instance, zero padded.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let half = (k / 2) as isize;
    let hw = h * w;
    cols.fill(0.0);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - half;
            let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize).max(0) as usize);
            for kx in 0..k {
                let dx = kx as isize - half;
                let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
                if x0 >= x1 {
                    continue;
                }
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&plane[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn softmax_rows(scores: &[f64], n: usize) -> Vec<f64> {
    let mut probs = vec![0.0; scores.len()];
    for (row, out) in scores.chunks(n).zip(probs.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &s) in out.iter_mut().zip(row) {
            *o = (s - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    probs
}

/// Class indices ordered by descending score; ties keep the lower index first.
pub(crate) fn rank_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    idx
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn own(&self, v: Var<'_>) -> Result<usize> {
        if !std::ptr::eq(self, v.tape) {
            return Err(invalid("variable belongs to a different tape"));
        }
        Ok(v.id)
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn elementwise(&self, code: Elementwise, a: Var<'_>, b: Option<Var<'_>>) -> Result<Var<'_>> {
        let ia = self.own(a)?;
        let av = self.value_of(ia);
        if code.is_binary() {
            let b = b.ok_or_else(|| invalid(format!("{code:?} needs two operands")))?;
            let ib = self.own(b)?;
            let bv = self.value_of(ib);
            let (shape, n) = if av.shape() == bv.shape() {
                (av.shape().to_vec(), av.len())
            } else if bv.is_scalar() {
                (av.shape().to_vec(), av.len())
            } else if av.is_scalar() {
                (bv.shape().to_vec(), bv.len())
            } else {
                return Err(Error::ShapeMismatch {
                    op: "elementwise",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            };
            let (sa, sb) = (av.len() == n, bv.len() == n);
            let (ad, bd) = (av.data(), bv.data());
            let get = |d: &[f64], full: bool, i: usize| if full { d[i] } else { d[0] };
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let (x, y) = (get(ad, sa, i), get(bd, sb, i));
                    match code {
                        Elementwise::Add => x + y,
                        Elementwise::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Ok(self.push(Tensor::from_parts(shape, data), Op::Binary { code, a: ia, b: ib }))
        } else {
            if b.is_some() {
                return Err(invalid(format!("{code:?} takes a single operand")));
            }
            let f: fn(f64, f64) -> f64 = match code {
                Elementwise::Scale(_) => |x, c| x * c,
                Elementwise::Relu => |x, _| if x > 0.0 { x } else { 0.0 },
                Elementwise::Negate => |x, _| -x,
                Elementwise::Exp => |x, _| x.exp(),
                Elementwise::Log => |x, _| x.ln(),
                _ => |x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
            };
            let c = if let Elementwise::Scale(c) = code { c } else { 0.0 };
            let data = av.data().iter().map(|&x| f(x, c)).collect();
            Ok(self.push(
                Tensor::from_parts(av.shape().to_vec(), data),
                Op::Unary { code, a: ia },
            ))
        }
    }

    pub fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        let (ia, ib) = (self.own(a)?, self.own(b)?);
        let (av, bv) = (self.value_of(ia), self.value_of(ib));
        let [m, k] = av.dims2()?;
        let [k2, n] = bv.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out, (n, 1));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib }))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    pub fn conv2d(&self, x: Var<'_>, kernel: Var<'_>) -> Result<Var<'_>> {
        let (ix, ik) = (self.own(x)?, self.own(kernel)?);
        let (xv, kv) = (self.value_of(ix), self.value_of(ik));
        let [b, c, h, w] = xv.dims4()?;
        let [f, kc, k, k2] = kv.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(invalid(format!(
                "conv2d needs an odd square kernel, got {k}x{k2}"
            )));
        }
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let ckk = c * k * k;
        let mut out = vec![0.0; b * f * hw];
        if c == 1 {
            // a single input plane: shifted row updates beat building patches
            for bi in 0..b {
                let xb = &xv.data()[bi * hw..(bi + 1) * hw];
                for fi in 0..f {
                    let taps = &kv.data()[fi * k * k..(fi + 1) * k * k];
                    shifted_axpy(xb, taps, h, w, k, &mut out[(bi * f + fi) * hw..(bi * f + fi + 1) * hw]);
                }
            }
        } else {
            let mut cols = vec![0.0; ckk * hw];
            for bi in 0..b {
                im2col(&xv.data()[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
                let ob = &mut out[bi * f * hw..(bi + 1) * f * hw];
                gemm(f, ckk, hw, kv.data(), (ckk, 1), &cols, (hw, 1), 0.0, ob, (hw, 1));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, f, h, w], out),
            Op::Conv2d { x: ix, kernel: ik },
        ))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&self, x: Var<'_>, bias: Var<'_>) -> Result<Var<'_>> {
        let (ix, ib) = (self.own(x)?, self.own(bias)?);
        let (xv, bv) = (self.value_of(ix), self.value_of(ib));
        let [_, c, h, w] = xv.dims4()?;
        if bv.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let bias = bv.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::ChannelBias { x: ix, bias: ib },
        ))
    }

    /// Adds `bias[j]` to column `j` of every row of a matrix.
    pub fn add_row_bias(&self, x: Var<'_>, bias: Var<'_>) -> Result<Var<'_>> {
        let (ix, ib) = (self.own(x)?, self.own(bias)?);
        let (xv, bv) = (self.value_of(ix), self.value_of(ib));
        let [_, n] = xv.dims2()?;
        if bv.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::RowBias { x: ix, bias: ib },
        ))
    }

    /// Zero border of width `pad` on all four sides.
    pub fn pad2d(&self, x: Var<'_>, pad: usize) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let xv = self.value_of(ix);
        let [b, c, h, w] = xv.dims4()?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; b * c * ph * pw];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
            for y in 0..h {
                let d0 = (y + pad) * pw + pad;
                dst[d0..d0 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, ph, pw], out),
            Op::Pad2d { x: ix, pad },
        ))
    }

    /// Spatial window of `size`×`size` pixels starting at (`row`, `col`).
    pub fn slice2d(&self, x: Var<'_>, row: usize, col: usize, size: usize) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let xv = self.value_of(ix);
        let [b, c, h, w] = xv.dims4()?;
        if row + size > h || col + size > w {
            return Err(invalid(format!(
                "slice2d window ({row}, {col}) of size {size} exceeds {h}x{w}"
            )));
        }
        let mut out = vec![0.0; b * c * size * size];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(size * size)) {
            for y in 0..size {
                let s0 = (row + y) * w + col;
                dst[y * size..(y + 1) * size].copy_from_slice(&src[s0..s0 + size]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, size, size], out),
            Op::Slice2d { x: ix, row, col },
        ))
    }

    /// Mirrors the width axis: column `j` goes to `W - 1 - j`.
    pub fn flip_width(&self, x: Var<'_>) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let xv = self.value_of(ix);
        let [_, _, _, w] = xv.dims4()?;
        let out = flip_rows(xv.data(), w);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::FlipWidth { x: ix },
        ))
    }

    /// Non-overlapping 2×2 average pooling; height and width must be even.
    pub fn avg_pool2(&self, x: Var<'_>) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let xv = self.value_of(ix);
        let [b, c, h, w] = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                let r0 = &src[2 * y * w..(2 * y + 1) * w];
                let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
                for x in 0..ow {
                    dst[y * ow + x] =
                        0.25 * ((r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]));
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::AvgPool2 { x: ix },
        ))
    }

    pub fn reshape(&self, x: Var<'_>, shape: &[usize]) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let out = self.value_of(ix).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x: ix }))
    }

    pub fn sum(&self, x: Var<'_>) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let s = self.value_of(ix).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: ix }))
    }

    pub fn mean(&self, x: Var<'_>) -> Result<Var<'_>> {
        let ix = self.own(x)?;
        let xv = self.value_of(ix);
        if xv.is_empty() {
            return Err(invalid("mean of an empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: ix }))
    }

    fn cross_entropy(&self, scores: Var<'_>, labels: &[usize], mean: bool) -> Result<Var<'_>> {
        let is = self.own(scores)?;
        let sv = self.value_of(is);
        let [b, n] = sv.dims2()?;
        if labels.len() != b {
            return Err(invalid(format!(
                "cross entropy got {} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let probs = softmax_rows(sv.data(), n);
        let losses: Vec<f64> = sv
            .data()
            .chunks(n)
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .collect();
        let out = if mean {
            Tensor::scalar(losses.iter().sum::<f64>() / b as f64)
        } else {
            Tensor::from_parts(vec![b], losses)
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                scores: is,
                labels: labels.to_vec(),
                probs,
                mean,
            },
        ))
    }

    /// Batch mean of `-log softmax(scores)[label]`.
    pub fn softmax_cross_entropy(&self, scores: Var<'_>, labels: &[usize]) -> Result<Var<'_>> {
        self.cross_entropy(scores, labels, true)
    }

    /// Per-instance cross entropy, shape `[B]`.
    pub fn cross_entropy_each(&self, scores: Var<'_>, labels: &[usize]) -> Result<Var<'_>> {
        self.cross_entropy(scores, labels, false)
    }

    /// Per-instance targeted difference-of-logits ratio
    /// `(z_y - z_t) / (z_π1 - z_π3)`, where π ranks the logits descending.
    pub fn dlr_targeted_each(
        &self,
        scores: Var<'_>,
        labels: &[usize],
        targets: &[usize],
    ) -> Result<Var<'_>> {
        let is = self.own(scores)?;
        let sv = self.value_of(is);
        let [b, n] = sv.dims2()?;
        if n < 4 {
            return Err(invalid(format!(
                "targeted DLR needs at least 4 classes, got {n}"
            )));
        }
        if labels.len() != b || targets.len() != b {
            return Err(invalid("targeted DLR label/target count mismatch"));
        }
        let mut rows = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        for (i, row) in sv.data().chunks(n).enumerate() {
            let (label, target) = (labels[i], targets[i]);
            if label >= n || target >= n {
                return Err(Error::LabelOutOfRange {
                    label: label.max(target),
                    classes: n,
                });
            }
            let rank = rank_desc(row);
            let numerator = row[label] - row[target];
            let denominator = row[rank[0]] - row[rank[2]] + DLR_EPS;
            out.push(numerator / denominator);
            rows.push(DlrRow {
                label,
                target,
                first: rank[0],
                third: rank[2],
                numerator,
                denominator,
            });
        }
        Ok(self.push(Tensor::from_parts(vec![b], out), Op::Dlr { scores: is, rows }))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.own(loss)?;
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !nodes[root].value.is_scalar() {
            return Err(Error::NonScalarLoss(shapes[root].clone()));
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(&shapes[root], 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Binary { code, a, b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = gd.len();
                    let (fa, fb) = (av.len() == n, bv.len() == n);
                    let at = |i: usize| if fa { av.data()[i] } else { av.data()[0] };
                    let bt = |i: usize| if fb { bv.data()[i] } else { bv.data()[0] };
                    let (da, db): (Vec<f64>, Vec<f64>) = match code {
                        Elementwise::Add => (gd.to_vec(), gd.to_vec()),
                        Elementwise::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                        _ => (
                            (0..n).map(|i| gd[i] * bt(i)).collect(),
                            (0..n).map(|i| gd[i] * at(i)).collect(),
                        ),
                    };
                    for (target, full, d) in [(*a, fa, da), (*b, fb, db)] {
                        accumulate(&mut grads[target], &shapes[target], |acc| {
                            if full {
                                acc.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                            } else {
                                acc[0] += d.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::Unary { code, a } => {
                    if *code == Elementwise::Sign {
                        grads[id] = Some(g);
                        continue;
                    }
                    let av = nodes[*a].value.data();
                    let out = node.value.data();
                    accumulate(&mut grads[*a], &shapes[*a], |acc| {
                        for i in 0..acc.len() {
                            acc[i] += match code {
                                Elementwise::Scale(c) => gd[i] * c,
                                Elementwise::Relu => {
                                    if av[i] > 0.0 {
                                        gd[i]
                                    } else {
                                        0.0
                                    }
                                }
                                Elementwise::Negate => -gd[i],
                                Elementwise::Exp => gd[i] * out[i],
                                Elementwise::Log => gd[i] / av[i],
                                _ => 0.0,
                            };
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let [m, k] = [shapes[*a][0], shapes[*a][1]];
                    let n = shapes[*b][1];
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    accumulate(&mut grads[*a], &shapes[*a], |acc| {
                        gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), 1.0, acc, (k, 1));
                    });
                    accumulate(&mut grads[*b], &shapes[*b], |acc| {
                        gemm(k, m, n, av.data(), (1, k), gd, (n, 1), 1.0, acc, (n, 1));
                    });
                }
                Op::Conv2d { x, kernel } => {
                    let [b, c, h, w] = [shapes[*x][0], shapes[*x][1], shapes[*x][2], shapes[*x][3]];
                    let [f, _, k, _] = [
                        shapes[*kernel][0],
                        shapes[*kernel][1],
                        shapes[*kernel][2],
                        shapes[*kernel][3],
                    ];
                    let hw = h * w;
                    let (xv, kv) = (nodes[*x].value.data(), nodes[*kernel].value.data());
                    let mut dk = vec![0.0; f * c * k * k];
                    let mut dx = vec![0.0; b * c * hw];
                    let ckk = c * k * k;
                    let mut flipped = vec![0.0; f * ckk];
                    for (t, v) in flipped.iter_mut().enumerate() {
                        let (fc, j) = (t / (k * k), t % (k * k));
                        *v = kv[fc * k * k + k * k - 1 - j];
                    }
                    let mut cols = vec![0.0; ckk * hw];
                    for bi in 0..b {
                        let gb = &gd[bi * f * hw..(bi + 1) * f * hw];
                        im2col(&xv[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
                        gemm(f, hw, ckk, gb, (hw, 1), &cols, (1, hw), 1.0, &mut dk, (ckk, 1));
                        let dxb = &mut dx[bi * c * hw..(bi + 1) * c * hw];
                        if c == 1 {
                            for fi in 0..f {
                                let t = fi * k * k;
                                shifted_axpy(&gb[fi * hw..(fi + 1) * hw], &flipped[t..t + k * k], h, w, k, dxb);
                            }
                        } else {
                            gemm(ckk, f, hw, kv, (1, ckk), gb, (hw, 1), 0.0, &mut cols, (hw, 1));
                            col2im_add(&cols, c, h, w, k, dxb);
                        }
                    }
                    add_into(&mut grads[*kernel], &shapes[*kernel], &dk);
                    add_into(&mut grads[*x], &shapes[*x], &dx);
                }
                Op::ChannelBias { x, bias } => {
                    let [_, c, h, w] = [shapes[*x][0], shapes[*x][1], shapes[*x][2], shapes[*x][3]];
                    accumulate(&mut grads[*bias], &shapes[*bias], |acc| {
                        for (i, plane) in gd.chunks(h * w).enumerate() {
                            acc[i % c] += plane.iter().sum::<f64>();
                        }
                    });
                    add_into(&mut grads[*x], &shapes[*x], gd);
                }
                Op::RowBias { x, bias } => {
                    let n = shapes[*bias][0];
                    accumulate(&mut grads[*bias], &shapes[*bias], |acc| {
                        for row in gd.chunks(n) {
                            acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                    });
                    add_into(&mut grads[*x], &shapes[*x], gd);
                }
                Op::Pad2d { x, pad } => {
                    let [_, _, h, w] = [shapes[*x][0], shapes[*x][1], shapes[*x][2], shapes[*x][3]];
                    let pw = w + 2 * pad;
                    let ph = h + 2 * pad;
                    accumulate(&mut grads[*x], &shapes[*x], |acc| {
                        for (dst, src) in acc.chunks_mut(h * w).zip(gd.chunks(ph * pw)) {
                            for y in 0..h {
                                let s0 = (y + pad) * pw + pad;
                                dst[y * w..(y + 1) * w]
                                    .iter_mut()
                                    .zip(&src[s0..s0 + w])
                                    .for_each(|(a, g)| *a += g);
                            }
                        }
                    });
                }
                Op::Slice2d { x, row, col } => {
                    let [_, _, h, w] = [shapes[*x][0], shapes[*x][1], shapes[*x][2], shapes[*x][3]];
                    let size = shapes[id][2];
                    accumulate(&mut grads[*x], &shapes[*x], |acc| {
                        for (dst, src) in acc.chunks_mut(h * w).zip(gd.chunks(size * size)) {
                            for y in 0..size {
                                let d0 = (row + y) * w + col;
                                dst[d0..d0 + size]
                                    .iter_mut()
                                    .zip(&src[y * size..(y + 1) * size])
                                    .for_each(|(a, g)| *a += g);
                            }
                        }
                    });
                }
                Op::FlipWidth { x } => {
                    let w = shapes[*x][3];
                    let flipped = flip_rows(gd, w);
                    add_into(&mut grads[*x], &shapes[*x], &flipped);
                }
                Op::AvgPool2 { x } => {
                    let [_, _, h, w] = [shapes[*x][0], shapes[*x][1], shapes[*x][2], shapes[*x][3]];
                    let (oh, ow) = (h / 2, w / 2);
                    accumulate(&mut grads[*x], &shapes[*x], |acc| {
                        for (dst, src) in acc.chunks_mut(h * w).zip(gd.chunks(oh * ow)) {
                            for y in 0..h {
                                for xx in 0..w {
                                    dst[y * w + xx] += 0.25 * src[(y / 2) * ow + xx / 2];
                                }
                            }
                        }
                    });
                }
                Op::Reshape { x } => add_into(&mut grads[*x], &shapes[*x], gd),
                Op::Sum { x } => {
                    let g0 = gd[0];
                    accumulate(&mut grads[*x], &shapes[*x], |acc| {
                        acc.iter_mut().for_each(|a| *a += g0)
                    });
                }
                Op::Mean { x } => {
                    let len = nodes[*x].value.len() as f64;
                    let g0 = gd[0] / len;
                    accumulate(&mut grads[*x], &shapes[*x], |acc| {
                        acc.iter_mut().for_each(|a| *a += g0)
                    });
                }
                Op::CrossEntropy {
                    scores,
                    labels,
                    probs,
                    mean,
                } => {
                    let n = shapes[*scores][1];
                    let b = labels.len();
                    accumulate(&mut grads[*scores], &shapes[*scores], |acc| {
                        for (i, &y) in labels.iter().enumerate() {
                            let gi = if *mean { gd[0] / b as f64 } else { gd[i] };
                            for j in 0..n {
                                let onehot = if j == y { 1.0 } else { 0.0 };
                                acc[i * n + j] += gi * (probs[i * n + j] - onehot);
                            }
                        }
                    });
                }
                Op::Dlr { scores, rows } => {
                    let n = shapes[*scores][1];
                    accumulate(&mut grads[*scores], &shapes[*scores], |acc| {
                        for (i, r) in rows.iter().enumerate() {
                            let base = i * n;
                            let inv = gd[i] / r.denominator;
                            let q = gd[i] * r.numerator / (r.denominator * r.denominator);
                            acc[base + r.label] += inv;
                            acc[base + r.target] -= inv;
                            acc[base + r.first] -= q;
                            acc[base + r.third] += q;
                        }
                    });
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

const DLR_EPS: f64 = 1e-12;

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], g: &[f64]) {
    accumulate(slot, shape, |acc| {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b)
    });
}

fn flip_rows(data: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Add, self, Some(other))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Sub, self, Some(other))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Mul, self, Some(other))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Scale(c), self, None)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Relu, self, None)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Negate, self, None)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Exp, self, None)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Log, self, None)
    }

    pub fn sign(self) -> Result<Var<'t>> {
        self.tape.elementwise(Elementwise::Sign, self, None)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.sum(self)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.mean(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function, h = 1e-5.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.max_abs_diff(b);
        let den = a
            .data()
            .iter()
            .chain(b.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        num / den
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against finite differences.
    fn check_unary(x: Tensor, tol: f64, f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) {
        let probe_shape = {
            let t = Tape::new();
            f(t.leaf(x.clone())).unwrap().shape()
        };
        let weights = random(&probe_shape, 99);
        let run = |x: &Tensor| {
            let t = Tape::new();
            let out = f(t.leaf(x.clone())).unwrap();
            out.value().dot(&weights)
        };
        let t = Tape::new();
        let xv = t.leaf(x.clone());
        let out = f(xv).unwrap();
        let w = t.leaf(weights.clone());
        let loss = out.mul(w).unwrap().sum().unwrap();
        let analytic = t.backward(loss).unwrap().wrt(xv);
        let numeric = numeric_grad(&x, &run);
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn relu_definition() {
        let t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let x = random(&[2, 3], 1);
        let t = Tape::new();
        let y = t.leaf(x.clone()).add(t.leaf(Tensor::scalar(0.0))).unwrap();
        assert!(y.value().bitwise_eq(&x));
    }

    #[test]
    fn square_gradient_at_three() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = t.backward(y).unwrap().wrt(x).item();
        let fd = ((3.0f64 + 1e-5).powi(2) - (3.0f64 - 1e-5).powi(2)) / 2e-5;
        assert!((g - 6.0).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(&[3, 4], 3);
        check_unary(x.clone(), 1e-6, |v| v.mul(v));
        check_unary(x.clone(), 1e-6, |v| v.scale(-2.5));
        check_unary(x.clone(), 1e-6, |v| v.exp());
        check_unary(x.clone(), 1e-6, |v| v.neg());
        check_unary(x.clone(), 1e-6, |v| v.relu());
        let positive = Tensor::from_fn(&[5], |i| 0.5 + i as f64);
        check_unary(positive, 1e-6, |v| v.ln());
        let c = random(&[3, 4], 4);
        check_unary(x.clone(), 1e-6, move |v| {
            let k = v.tape().leaf(c.clone());
            v.sub(k)?.mul(v.add(k)?)
        });
        check_unary(x, 1e-6, |v| {
            let s = v.tape().leaf(Tensor::scalar(1.7));
            v.mul(s)?.add(s)
        });
    }

    #[test]
    fn sign_has_zero_gradient() {
        let t = Tape::new();
        let x = t.leaf(random(&[4], 5));
        let loss = x.sign().unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_examples() {
        let t = Tape::new();
        let eye = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mv = t.leaf(m.clone());
        assert!(eye.matmul(mv).unwrap().value().bitwise_eq(&m));
        let ones = t.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        assert_eq!(mv.matmul(ones).unwrap().value().data(), &[3.0, 7.0]);
        assert!(mv.matmul(t.leaf(Tensor::zeros(&[3, 1]))).is_err());
    }

    #[test]
    fn matmul_gradients() {
        let a = random(&[4, 5], 6);
        let b = random(&[5, 3], 7);
        let bb = b.clone();
        check_unary(a.clone(), 1e-6, move |v| v.matmul(v.tape().leaf(bb.clone())));
        check_unary(b, 1e-6, move |v| v.tape().leaf(a.clone()).matmul(v));
    }

    #[test]
    fn conv_examples() {
        let t = Tape::new();
        let x = random(&[1, 1, 5, 5], 8);
        let xv = t.leaf(x.clone());
        let id = t.leaf(Tensor::full(&[1, 1, 1, 1], 1.0));
        assert!(t.conv2d(xv, id).unwrap().value().bitwise_eq(&x));

        let c = t.leaf(Tensor::full(&[1, 1, 6, 6], 0.5));
        let ones = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(c, ones).unwrap().value();
        for r in 1..5 {
            for col in 1..5 {
                assert_eq!(y.data()[r * 6 + col], 4.5);
            }
        }
        assert_eq!(y.data()[0], 2.0);
        let even = t.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.conv2d(c, even).is_err());
    }

    #[test]
    fn conv_gradients() {
        let x = random(&[2, 2, 6, 6], 9);
        let k = random(&[3, 2, 3, 3], 10);
        let kk = k.clone();
        check_unary(x.clone(), 1e-5, move |v| {
            v.tape().conv2d(v, v.tape().leaf(kk.clone()))
        });
        check_unary(k, 1e-5, move |v| v.tape().conv2d(v.tape().leaf(x.clone()), v));
        let x5 = random(&[1, 2, 5, 7], 11);
        let k5 = random(&[2, 2, 5, 5], 12);
        check_unary(x5, 1e-5, move |v| v.tape().conv2d(v, v.tape().leaf(k5.clone())));
        // single input channel takes the direct path
        let x1 = random(&[2, 1, 6, 5], 13);
        let k1 = random(&[3, 1, 3, 3], 14);
        let xx = x1.clone();
        check_unary(x1, 1e-5, {
            let k1 = k1.clone();
            move |v| v.tape().conv2d(v, v.tape().leaf(k1.clone()))
        });
        check_unary(k1, 1e-5, move |v| v.tape().conv2d(v.tape().leaf(xx.clone()), v));
    }

    #[test]
    fn pad_and_slice() {
        let t = Tape::new();
        let x = random(&[1, 2, 4, 4], 13);
        let xv = t.leaf(x.clone());
        assert!(t.pad2d(xv, 0).unwrap().value().bitwise_eq(&x));
        let centre = t.slice2d(t.pad2d(xv, 4).unwrap(), 4, 4, 4).unwrap();
        assert!(centre.value().bitwise_eq(&x));
        assert!(t.slice2d(xv, 0, 0, 4).unwrap().value().bitwise_eq(&x));
        assert!(t.slice2d(xv, 1, 0, 4).is_err());

        let ones = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let p = t.pad2d(ones, 1).unwrap().value();
        let expect = [
            0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.,
        ];
        assert_eq!(p.data(), &expect);
    }

    #[test]
    fn pad_backward_is_interior_slice() {
        let t = Tape::new();
        let x = t.leaf(random(&[1, 1, 3, 3], 14));
        let p = t.pad2d(x, 2).unwrap();
        let g = random(&[1, 1, 7, 7], 15);
        let w = t.leaf(g.clone());
        let loss = p.mul(w).unwrap().sum().unwrap();
        let got = t.backward(loss).unwrap().wrt(x);
        for y in 0..3 {
            for c in 0..3 {
                assert_eq!(got.data()[y * 3 + c], g.data()[(y + 2) * 7 + c + 2]);
            }
        }
    }

    #[test]
    fn index_op_gradients() {
        let x = random(&[1, 1, 6, 6], 16);
        check_unary(x.clone(), 1e-6, |v| v.tape().slice2d(v, 1, 2, 3));
        check_unary(x.clone(), 1e-6, |v| v.tape().flip_width(v));
        check_unary(x.clone(), 1e-6, |v| v.tape().pad2d(v, 2));
        check_unary(x, 1e-6, |v| v.tape().avg_pool2(v));
    }

    #[test]
    fn flip_examples() {
        let t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = t.flip_width(x).unwrap();
        assert_eq!(f.value().data(), &[4.0, 3.0, 2.0, 1.0]);
        let ff = t.flip_width(f).unwrap();
        assert!(ff.value().bitwise_eq(&x.value()));
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Tape::new();
        let s = t.leaf(Tensor::zeros(&[1, 4]));
        let l = t.softmax_cross_entropy(s, &[2]).unwrap().value().item();
        assert!((l - 4f64.ln()).abs() < 1e-15);

        let s = t.leaf(Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap());
        assert!(t.softmax_cross_entropy(s, &[0]).unwrap().value().item() < 1e-20);
        assert!(matches!(
            t.softmax_cross_entropy(s, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let s = random(&[3, 5], 17);
        let labels = [0usize, 4, 2];
        let t = Tape::new();
        let sv = t.leaf(s.clone());
        let loss = t.softmax_cross_entropy(sv, &labels).unwrap();
        let g = t.backward(loss).unwrap().wrt(sv);
        let probs = softmax_rows(s.data(), 5);
        for i in 0..3 {
            for j in 0..5 {
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                let expect = (probs[i * 5 + j] - onehot) / 3.0;
                assert!((g.data()[i * 5 + j] - expect).abs() < 1e-15);
            }
        }
        let f = |x: &Tensor| {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            t.softmax_cross_entropy(v, &labels).unwrap().value().item()
        };
        assert!(rel_err(&g, &numeric_grad(&s, &f)) < 1e-6);
        check_unary(s, 1e-6, move |v| v.tape().cross_entropy_each(v, &labels));
    }

    #[test]
    fn dlr_denominator_and_gradient() {
        let t = Tape::new();
        let s = t.leaf(Tensor::new(vec![1, 4], vec![5.0, 3.0, 2.0, 1.0]).unwrap());
        let d = t.dlr_targeted_each(s, &[0], &[1]).unwrap().value().item();
        assert!((d - (5.0 - 3.0) / 3.0).abs() < 1e-12);
        let three = t.leaf(Tensor::zeros(&[1, 3]));
        assert!(t.dlr_targeted_each(three, &[0], &[1]).is_err());

        let x = random(&[4, 6], 18);
        check_unary(x, 1e-6, |v| v.tape().dlr_targeted_each(v, &[0, 1, 2, 5], &[3, 3, 4, 0]));
    }

    #[test]
    fn backward_examples() {
        let t = Tape::new();
        let x = t.leaf(random(&[7], 19));
        let unused = t.leaf(random(&[2], 20));
        let loss = x.mean().unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0 / 7.0));
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x = random(&[2, 1, 6, 6], 21);
        let k = random(&[3, 1, 3, 3], 22);
        let w = random(&[3 * 36, 4], 23);
        let f = |xx: &Tensor| -> f64 {
            let t = Tape::new();
            let v = t.leaf(xx.clone());
            composite(&t, v, &k, &w).value().item()
        };
        let t = Tape::new();
        let v = t.leaf(x.clone());
        let loss = composite(&t, v, &k, &w);
        let g = t.backward(loss).unwrap().wrt(v);
        assert!(rel_err(&g, &numeric_grad(&x, &f)) < 1e-4);
    }

    fn composite<'t>(t: &'t Tape, x: Var<'t>, k: &Tensor, w: &Tensor) -> Var<'t> {
        let h = t.conv2d(x, t.leaf(k.clone())).unwrap().relu().unwrap();
        let flat = t.reshape(h, &[2, 3 * 36]).unwrap();
        let s = flat.matmul(t.leaf(w.clone())).unwrap();
        t.softmax_cross_entropy(s, &[1, 3]).unwrap()
    }

    #[test]
    fn biases_gradients() {
        let x = random(&[2, 3, 2, 2], 24);
        let b = random(&[3], 25);
        let xx = x.clone();
        check_unary(b, 1e-6, move |v| v.tape().add_channel_bias(v.tape().leaf(xx.clone()), v));
        let m = random(&[4, 3], 26);
        check_unary(random(&[3], 27), 1e-6, move |v| {
            v.tape().add_row_bias(v.tape().leaf(m.clone()), v)
        });
        check_unary(x, 1e-6, |v| {
            let b = v.tape().leaf(Tensor::full(&[3], 0.5));
            v.tape().add_channel_bias(v, b)
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let x = random(&[2, 1, 6, 6], 28);
        let k = random(&[3, 1, 3, 3], 29);
        let w = random(&[3 * 36, 4], 30);
        let run = || {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            let loss = composite(&t, v, &k, &w);
            (loss.value().item().to_bits(), t.backward(loss).unwrap().wrt(v))
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.bitwise_eq(&gb));
    }
}
