//! Define-by-run reverse-mode autodiff over `ndarray`, f64 only.
//!
//! A `Tape` records each operation eagerly (forward values are computed
//! immediately) and `backward` walks the recording in reverse, accumulating
//! gradients into parameter names. The op set is exactly what the networks
//! and losses in this crate need — nothing speculative — and every op has a
//! finite-difference test.
//!
//! Conventions: feature maps are `[C, H, W]`, vectors `[N]`, scalars 0-d.
//! Convolutions are stride 1 with `k/2` zero padding (shape-preserving).

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Ix1, Ix2, Ix3, IxDyn};

use crate::params::{Gradients, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

enum Op {
    Leaf,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddChanBias { x: usize, b: usize },
    MatVec { w: usize, x: usize },
    Silu(usize),
    LeakyRelu(usize, f64),
    Conv2d { x: usize, w: usize, b: usize, k: usize, col: Array2<f64> },
    AvgPool2(usize),
    UpNearest2(usize),
    UpBilinear { x: usize, factor: usize },
    ConcatC(Vec<usize>),
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, xhat: Array3<f64>, inv_std: Vec<f64> },
    CeMean { logits: usize, probs: Array3<f64>, target: Array3<f64>, weights: Option<Array2<f64>>, denom: f64 },
    SoftDice { logits: usize, probs: Array3<f64>, target: Array3<f64>, eps: f64 },
    MseMean(usize, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// One forward/backward recording. Build a fresh tape per training step.
pub struct Tape {
    inner: RefCell<TapeInner>,
    grad: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape { inner: RefCell::default(), grad: true }
    }
}

fn v3(value: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    value.view().into_dimensionality::<Ix3>().expect("expected a [C,H,W] tensor")
}

fn v2(value: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    value.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

fn softmax_chw(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut probs = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits[[k, y, x]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits[[k, y, x]] - m).exp();
                probs[[k, y, x]] = e;
                z += e;
            }
            for k in 0..c {
                probs[[k, y, x]] /= z;
            }
        }
    }
    probs
}

/// Unrolls `[C, H, W]` into the `[C·k², H·W]` patch matrix for stride-1,
/// pad-k/2 convolution.
fn im2col(x: ArrayView3<'_, f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut col = Array2::zeros((c * k * k, h * w));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..w {
                        let sx = xx + dx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        col[[row, y * w + xx]] = x[[ci, sy, sx - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatter-adds patch-matrix gradients back to `[C,H,W]`.
fn col2im(gcol: ArrayView2<'_, f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = k / 2;
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..w {
                        let sx = xx + dx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        gx[[ci, sy, sx - pad]] += gcol[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    gx
}

/// Per-output-index (lo, hi, frac) for 1D bilinear interpolation with
/// half-pixel centers (align_corners = false) and edge replication.
fn bilerp_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = (src - lo as f64).clamp(0.0, 1.0);
            (lo, hi, frac)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward-only tape: skips the per-op workspaces backward would need
    /// (convolution patch matrices and the like). `backward` panics on it.
    pub fn inference() -> Self {
        Tape { inner: RefCell::default(), grad: false }
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        Var { idx: inner.nodes.len() - 1 }
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.inner.borrow().nodes[v.idx].value)
    }

    /// Constant leaf; gradients stop here.
    pub fn input(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn input1(&self, value: Array1<f64>) -> Var {
        self.input(value.into_dyn())
    }

    pub fn input3(&self, value: Array3<f64>) -> Var {
        self.input(value.into_dyn())
    }

    /// Leaf bound to a named parameter; repeated binds return the same node
    /// so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var {
        if let Some(&idx) = self.inner.borrow().params.get(name) {
            return Var { idx };
        }
        let v = self.push(store.value(name).clone(), Op::Param(name.to_string()));
        self.inner.borrow_mut().params.insert(name.to_string(), v.idx);
        v
    }

    /// Re-enters a value as a constant leaf (stop-gradient).
    pub fn detach(&self, v: Var) -> Var {
        let value = self.with_value(v, |x| x.clone());
        self.input(value)
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.with_value(v, |x| x.clone())
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        self.with_value(v, |x| x.clone().into_dimensionality::<Ix3>().unwrap())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.with_value(v, |x| {
            assert_eq!(x.len(), 1, "expected a scalar node");
            *x.iter().next().unwrap()
        })
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |x| x.shape().to_vec())
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.with_value(a, |x| {
            self.with_value(b, |y| {
                assert_eq!(x.shape(), y.shape(), "add shape mismatch");
                x + y
            })
        });
        self.push(value, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.with_value(a, |x| {
            self.with_value(b, |y| {
                assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
                x - y
            })
        });
        self.push(value, Op::Sub(a.idx, b.idx))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |x| x * c);
        self.push(value, Op::Scale(a.idx, c))
    }

    /// `x[C,H,W] + b[C]` broadcast over space.
    pub fn add_chan_bias(&self, x: Var, b: Var) -> Var {
        let value = self.with_value(x, |xv| {
            self.with_value(b, |bv| {
                let xv = v3(xv);
                assert_eq!(bv.len(), xv.dim().0, "bias length != channels");
                let mut out = xv.to_owned();
                for (c, mut plane) in out.outer_iter_mut().enumerate() {
                    plane += bv[[c]];
                }
                out.into_dyn()
            })
        });
        self.push(value, Op::AddChanBias { x: x.idx, b: b.idx })
    }

    /// `w[O,I] · x[I] → [O]`.
    pub fn matvec(&self, w: Var, x: Var) -> Var {
        let value = self.with_value(w, |wv| {
            self.with_value(x, |xv| {
                let wv = v2(wv);
                let xv = xv.view().into_dimensionality::<Ix1>().expect("matvec needs a vector");
                assert_eq!(wv.dim().1, xv.len(), "matvec shape mismatch");
                wv.dot(&xv).into_dyn()
            })
        });
        self.push(value, Op::MatVec { w: w.idx, x: x.idx })
    }

    pub fn silu(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v / (1.0 + (-v).exp())));
        self.push(value, Op::Silu(a.idx))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }));
        self.push(value, Op::LeakyRelu(a.idx, slope))
    }

    /// Stride-1 same-shape convolution; `w` is `[cout, cin·k²]`, `b` `[cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let (value, col) = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let xv = v3(xv);
                    let wv = v2(wv);
                    let (c, h, wd) = xv.dim();
                    assert_eq!(wv.dim().1, c * k * k, "conv kernel shape mismatch");
                    assert_eq!(bv.len(), wv.dim().0, "conv bias shape mismatch");
                    let col = im2col(xv, k);
                    let mut out = wv.dot(&col);
                    for (r, mut row) in out.outer_iter_mut().enumerate() {
                        row += bv[[r]];
                    }
                    let out = out.into_shape_with_order((wv.dim().0, h, wd)).unwrap();
                    let col = if self.grad { col } else { Array2::zeros((0, 0)) };
                    (out.into_dyn(), col)
                })
            })
        });
        self.push(value, Op::Conv2d { x: x.idx, w: w.idx, b: b.idx, k, col })
    }

    /// 2×2 mean pooling; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let value = self.with_value(x, |xv| {
            let xv = v3(xv);
            let (c, h, w) = xv.dim();
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
            let mut out = Array3::zeros((c, h / 2, w / 2));
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        out[[ci, y, xx]] = (xv[[ci, 2 * y, 2 * xx]]
                            + xv[[ci, 2 * y, 2 * xx + 1]]
                            + xv[[ci, 2 * y + 1, 2 * xx]]
                            + xv[[ci, 2 * y + 1, 2 * xx + 1]])
                            / 4.0;
                    }
                }
            }
            out.into_dyn()
        });
        self.push(value, Op::AvgPool2(x.idx))
    }

    /// 2× nearest-neighbor upsampling.
    pub fn up_nearest2(&self, x: Var) -> Var {
        let value = self.with_value(x, |xv| {
            let xv = v3(xv);
            let (c, h, w) = xv.dim();
            Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| xv[[ci, y / 2, xx / 2]])
                .into_dyn()
        });
        self.push(value, Op::UpNearest2(x.idx))
    }

    /// Integer-factor bilinear upsampling with half-pixel centers.
    pub fn up_bilinear(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let value = self.with_value(x, |xv| {
            let xv = v3(xv);
            let (c, h, w) = xv.dim();
            let ty = bilerp_table(h, factor);
            let tx = bilerp_table(w, factor);
            let mut out = Array3::zeros((c, h * factor, w * factor));
            for ci in 0..c {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        out[[ci, oy, ox]] = (1.0 - fy) * (1.0 - fx) * xv[[ci, y0, x0]]
                            + (1.0 - fy) * fx * xv[[ci, y0, x1]]
                            + fy * (1.0 - fx) * xv[[ci, y1, x0]]
                            + fy * fx * xv[[ci, y1, x1]];
                    }
                }
            }
            out.into_dyn()
        });
        self.push(value, Op::UpBilinear { x: x.idx, factor })
    }

    /// Channel concatenation of `[Ci, H, W]` maps.
    pub fn concat_c(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let inner = self.inner.borrow();
            let views: Vec<ArrayView3<'_, f64>> =
                parts.iter().map(|p| v3(&inner.nodes[p.idx].value)).collect();
            let (_, h, w) = views[0].dim();
            assert!(views.iter().all(|v| v.dim().1 == h && v.dim().2 == w));
            let total: usize = views.iter().map(|v| v.dim().0).sum();
            let mut out = Array3::zeros((total, h, w));
            let mut at = 0;
            for v in &views {
                let c = v.dim().0;
                out.slice_mut(ndarray::s![at..at + c, .., ..]).assign(v);
                at += c;
            }
            out.into_dyn()
        };
        self.push(value, Op::ConcatC(parts.iter().map(|p| p.idx).collect()))
    }

    /// Group normalization over `[C,H,W]` with per-channel affine. With
    /// `groups == C` this is instance norm, which is also exactly what batch
    /// normalization computes at batch size 1 in training mode.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let (value, xhat, inv_std) = self.with_value(x, |xv| {
            self.with_value(gamma, |gv| {
                self.with_value(beta, |bv| {
                    let xv = v3(xv);
                    let (c, h, w) = xv.dim();
                    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
                    assert_eq!(gv.len(), c);
                    assert_eq!(bv.len(), c);
                    let per = c / groups;
                    let m = (per * h * w) as f64;
                    let mut xhat = Array3::zeros((c, h, w));
                    let mut inv_std = Vec::with_capacity(groups);
                    for g in 0..groups {
                        let sl = xv.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
                        let mean = sl.sum() / m;
                        let var = sl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                        let is = 1.0 / (var + EPS).sqrt();
                        inv_std.push(is);
                        let mut dst = xhat.slice_mut(ndarray::s![g * per..(g + 1) * per, .., ..]);
                        dst.assign(&sl);
                        dst.mapv_inplace(|v| (v - mean) * is);
                    }
                    let mut out = xhat.clone();
                    for (ci, mut plane) in out.outer_iter_mut().enumerate() {
                        plane.mapv_inplace(|v| v * gv[[ci]]);
                        plane += bv[[ci]];
                    }
                    let xhat = if self.grad { xhat } else { Array3::zeros((0, 0, 0)) };
                    (out.into_dyn(), xhat, inv_std)
                })
            })
        });
        self.push(
            value,
            Op::GroupNorm { x: x.idx, gamma: gamma.idx, beta: beta.idx, groups, xhat, inv_std },
        )
    }

    /// Mean softmax cross-entropy of `[C,H,W]` logits against a one-hot
    /// target, optionally weighted per pixel. Weighted form divides by the
    /// weight sum (0 retained pixels → loss 0).
    pub fn ce_mean(&self, logits: Var, target: Array3<f64>, weights: Option<Array2<f64>>) -> Var {
        let (value, probs, denom) = self.with_value(logits, |lv| {
            let lv = v3(lv);
            let (c, h, w) = lv.dim();
            assert_eq!(target.dim(), (c, h, w), "ce target shape mismatch");
            if let Some(ws) = &weights {
                assert_eq!(ws.dim(), (h, w), "ce weight shape mismatch");
            }
            let probs = softmax_chw(lv);
            let denom = match &weights {
                Some(ws) => ws.sum(),
                None => (h * w) as f64,
            };
            let mut total = 0.0;
            if denom > 0.0 {
                for y in 0..h {
                    for x in 0..w {
                        let wt = weights.as_ref().map_or(1.0, |ws| ws[[y, x]]);
                        if wt == 0.0 {
                            continue;
                        }
                        let mut ce = 0.0;
                        for k in 0..c {
                            if target[[k, y, x]] != 0.0 {
                                ce -= target[[k, y, x]] * probs[[k, y, x]].max(1e-300).ln();
                            }
                        }
                        total += wt * ce;
                    }
                }
                total /= denom;
            }
            (ArrayD::from_elem(IxDyn(&[]), total), probs, denom)
        });
        self.push(value, Op::CeMean { logits: logits.idx, probs, target, weights, denom })
    }

    /// Soft Dice loss: 1 − mean over classes of (2Σpg+ε)/(Σp+Σg+ε) with
    /// p = softmax(logits).
    pub fn soft_dice(&self, logits: Var, target: Array3<f64>, eps: f64) -> Var {
        let (value, probs) = self.with_value(logits, |lv| {
            let lv = v3(lv);
            assert_eq!(lv.dim(), target.dim(), "dice target shape mismatch");
            let probs = softmax_chw(lv);
            let c = lv.dim().0;
            let mut acc = 0.0;
            for k in 0..c {
                let p = probs.index_axis(ndarray::Axis(0), k);
                let g = target.index_axis(ndarray::Axis(0), k);
                let s: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                acc += (2.0 * s + eps) / (p.sum() + g.sum() + eps);
            }
            (ArrayD::from_elem(IxDyn(&[]), 1.0 - acc / c as f64), probs)
        });
        self.push(value, Op::SoftDice { logits: logits.idx, probs, target, eps })
    }

    /// Mean squared difference between two same-shape tensors.
    pub fn mse_mean(&self, a: Var, b: Var) -> Var {
        let value = self.with_value(a, |x| {
            self.with_value(b, |y| {
                assert_eq!(x.shape(), y.shape(), "mse shape mismatch");
                let n = x.len() as f64;
                let sum: f64 = x.iter().zip(y.iter()).map(|(u, v)| (u - v).powi(2)).sum();
                ArrayD::from_elem(IxDyn(&[]), sum / n)
            })
        });
        self.push(value, Op::MseMean(a.idx, b.idx))
    }

    /// Reverse pass from a scalar loss; returns parameter gradients by name.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad, "backward called on an inference tape");
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(nodes[loss.idx].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(ArrayD::ones(nodes[loss.idx].value.raw_dim()));
        let mut out = Gradients::default();
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Param(name) => out.insert(name.clone(), g),
                Op::Add(a, b) => {
                    accum(&mut grads, *b, g.clone());
                    accum(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, -&g);
                    accum(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g * *c),
                Op::AddChanBias { x, b } => {
                    let g3 = v3(&g);
                    let gb = Array1::from_iter(g3.outer_iter().map(|p| p.sum()));
                    accum(&mut grads, *b, gb.into_dyn());
                    accum(&mut grads, *x, g);
                }
                Op::MatVec { w, x } => {
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    let wv = v2(&nodes[*w].value);
                    let xv = nodes[*x].value.view().into_dimensionality::<Ix1>().unwrap();
                    let mut gw = Array2::zeros(wv.dim());
                    for o in 0..wv.dim().0 {
                        for iidx in 0..wv.dim().1 {
                            gw[[o, iidx]] = gv[o] * xv[iidx];
                        }
                    }
                    accum(&mut grads, *w, gw.into_dyn());
                    accum(&mut grads, *x, wv.t().dot(&gv).into_dyn());
                }
                Op::Silu(a) => {
                    let xv = &nodes[*a].value;
                    let mut gx = g.clone();
                    gx.zip_mut_with(xv, |gi, &x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        *gi *= s * (1.0 + x * (1.0 - s));
                    });
                    accum(&mut grads, *a, gx);
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = &nodes[*a].value;
                    let mut gx = g.clone();
                    gx.zip_mut_with(xv, |gi, &x| {
                        if x <= 0.0 {
                            *gi *= slope;
                        }
                    });
                    accum(&mut grads, *a, gx);
                }
                Op::Conv2d { x, w, b, k, col } => {
                    let g3 = v3(&g);
                    let (cout, h, wd) = g3.dim();
                    let gm = g3.to_shape((cout, h * wd)).unwrap();
                    let gb = Array1::from_iter(gm.outer_iter().map(|r| r.sum()));
                    accum(&mut grads, *b, gb.into_dyn());
                    let gw = gm.dot(&col.t());
                    accum(&mut grads, *w, gw.into_dyn());
                    let wv = v2(&nodes[*w].value);
                    let gcol = wv.t().dot(&gm);
                    let (cin_kk, _) = gcol.dim();
                    let cin = cin_kk / (k * k);
                    accum(&mut grads, *x, col2im(gcol.view(), cin, h, wd, *k).into_dyn());
                }
                Op::AvgPool2(a) => {
                    let g3 = v3(&g);
                    let (c, h2, w2) = g3.dim();
                    let mut gx = Array3::zeros((c, h2 * 2, w2 * 2));
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let v = g3[[ci, y, xx]] / 4.0;
                                gx[[ci, 2 * y, 2 * xx]] = v;
                                gx[[ci, 2 * y, 2 * xx + 1]] = v;
                                gx[[ci, 2 * y + 1, 2 * xx]] = v;
                                gx[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                            }
                        }
                    }
                    accum(&mut grads, *a, gx.into_dyn());
                }
                Op::UpNearest2(a) => {
                    let g3 = v3(&g);
                    let (c, h2, w2) = g3.dim();
                    let mut gx = Array3::zeros((c, h2 / 2, w2 / 2));
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[[ci, y / 2, xx / 2]] += g3[[ci, y, xx]];
                            }
                        }
                    }
                    accum(&mut grads, *a, gx.into_dyn());
                }
                Op::UpBilinear { x, factor } => {
                    let g3 = v3(&g);
                    let x3 = v3(&nodes[*x].value);
                    let (c, h, w) = x3.dim();
                    let ty = bilerp_table(h, *factor);
                    let tx = bilerp_table(w, *factor);
                    let mut gx = Array3::zeros((c, h, w));
                    for ci in 0..c {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = g3[[ci, oy, ox]];
                                gx[[ci, y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                                gx[[ci, y0, x1]] += (1.0 - fy) * fx * gv;
                                gx[[ci, y1, x0]] += fy * (1.0 - fx) * gv;
                                gx[[ci, y1, x1]] += fy * fx * gv;
                            }
                        }
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::ConcatC(parts) => {
                    let g3 = v3(&g);
                    let mut at = 0;
                    for &p in parts {
                        let c = nodes[p].value.shape()[0];
                        let gp = g3.slice(ndarray::s![at..at + c, .., ..]).to_owned();
                        accum(&mut grads, p, gp.into_dyn());
                        at += c;
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                    let g3 = v3(&g);
                    let (c, h, w) = g3.dim();
                    let per = c / groups;
                    let m = (per * h * w) as f64;
                    let gammav = &nodes[*gamma].value;
                    let mut ggamma = Array1::zeros(c);
                    let mut gbeta = Array1::zeros(c);
                    for ci in 0..c {
                        let gp = g3.index_axis(ndarray::Axis(0), ci);
                        let xp = xhat.index_axis(ndarray::Axis(0), ci);
                        ggamma[ci] = gp.iter().zip(xp.iter()).map(|(a, b)| a * b).sum();
                        gbeta[ci] = gp.sum();
                    }
                    let mut gx = Array3::zeros((c, h, w));
                    for grp in 0..*groups {
                        let range = grp * per..(grp + 1) * per;
                        let mut sum1 = 0.0;
                        let mut sum2 = 0.0;
                        for ci in range.clone() {
                            let ga = gammav[[ci]];
                            for y in 0..h {
                                for xx in 0..w {
                                    let dxh = g3[[ci, y, xx]] * ga;
                                    sum1 += dxh;
                                    sum2 += dxh * xhat[[ci, y, xx]];
                                }
                            }
                        }
                        let is = inv_std[grp];
                        for ci in range {
                            let ga = gammav[[ci]];
                            for y in 0..h {
                                for xx in 0..w {
                                    let dxh = g3[[ci, y, xx]] * ga;
                                    gx[[ci, y, xx]] = is
                                        * (dxh - (sum1 + xhat[[ci, y, xx]] * sum2) / m);
                                }
                            }
                        }
                    }
                    accum(&mut grads, *gamma, ggamma.into_dyn());
                    accum(&mut grads, *beta, gbeta.into_dyn());
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::CeMean { logits, probs, target, weights, denom } => {
                    if *denom > 0.0 {
                        let gs = *g.iter().next().unwrap();
                        let (c, h, w) = probs.dim();
                        let mut gl = Array3::zeros((c, h, w));
                        for y in 0..h {
                            for x in 0..w {
                                let wt = weights.as_ref().map_or(1.0, |ws| ws[[y, x]]);
                                if wt == 0.0 {
                                    continue;
                                }
                                for k in 0..c {
                                    gl[[k, y, x]] = gs * wt / denom
                                        * (probs[[k, y, x]] - target[[k, y, x]]);
                                }
                            }
                        }
                        accum(&mut grads, *logits, gl.into_dyn());
                    }
                }
                Op::SoftDice { logits, probs, target, eps } => {
                    let gs = *g.iter().next().unwrap();
                    let (c, h, w) = probs.dim();
                    // Per class: D_c = (2S_c+ε)/(P_c+G_c+ε);
                    // ∂L/∂p = −(1/C)·(2g·B_c − A_c)/B_c².
                    let mut a_c = vec![0.0; c];
                    let mut b_c = vec![0.0; c];
                    for k in 0..c {
                        let p = probs.index_axis(ndarray::Axis(0), k);
                        let t = target.index_axis(ndarray::Axis(0), k);
                        let s: f64 = p.iter().zip(t.iter()).map(|(x, y)| x * y).sum();
                        a_c[k] = 2.0 * s + eps;
                        b_c[k] = p.sum() + t.sum() + eps;
                    }
                    let mut gl = Array3::zeros((c, h, w));
                    for y in 0..h {
                        for x in 0..w {
                            let mut dp = vec![0.0; c];
                            for k in 0..c {
                                dp[k] = -(1.0 / c as f64)
                                    * (2.0 * target[[k, y, x]] * b_c[k] - a_c[k])
                                    / (b_c[k] * b_c[k]);
                            }
                            // Chain through the per-pixel softmax.
                            let dot: f64 =
                                (0..c).map(|k| dp[k] * probs[[k, y, x]]).sum();
                            for k in 0..c {
                                gl[[k, y, x]] = gs * probs[[k, y, x]] * (dp[k] - dot);
                            }
                        }
                    }
                    accum(&mut grads, *logits, gl.into_dyn());
                }
                Op::MseMean(a, b) => {
                    let gs = *g.iter().next().unwrap();
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = av.len() as f64;
                    let diff = (av - bv) * (2.0 * gs / n);
                    accum(&mut grads, *b, -&diff);
                    accum(&mut grads, *a, diff);
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
    }

    /// Central finite differences of `loss` w.r.t. every element of `name`,
    /// compared against the backprop gradient.
    fn check_grads(
        store: &mut ParamStore,
        names: &[&str],
        loss: impl Fn(&ParamStore) -> (f64, Gradients),
        tol: f64,
    ) {
        let (_, grads) = loss(store);
        let h = 1e-6;
        for name in names {
            let n = store.value(name).len();
            for i in 0..n {
                let orig = store.value(name).as_slice().unwrap()[i];
                store.value_mut(name).as_slice_mut().unwrap()[i] = orig + h;
                let (lp, _) = loss(store);
                store.value_mut(name).as_slice_mut().unwrap()[i] = orig - h;
                let (lm, _) = loss(store);
                store.value_mut(name).as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let bp = grads
                    .get(name)
                    .map_or(0.0, |g| g.as_slice().unwrap()[i]);
                let denom = bp.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (bp - fd).abs() / denom < tol,
                    "{name}[{i}]: backprop {bp} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn add_sub_scale_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_raw("a", randn(&[2, 3, 3], &mut rng));
        store.add_raw("b", randn(&[2, 3, 3], &mut rng));
        let target = randn(&[2, 3, 3], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["a", "b"],
            |s| {
                let t = Tape::new();
                let a = t.param(s, "a");
                let b = t.param(s, "b");
                let x = t.scale(t.sub(t.add(a, b), b), 1.7);
                let tv = t.input3(target.clone());
                let l = t.mse_mean(x, tv);
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
    }

    #[test]
    fn conv_and_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add_raw("x", randn(&[2, 4, 4], &mut rng));
        store.add_conv("c", 3, 2, 3, &mut rng);
        let target = randn(&[3, 4, 4], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["x", "c.w", "c.b"],
            |s| {
                let t = Tape::new();
                let x = t.param(s, "x");
                let out = t.conv2d(x, t.param(s, "c.w"), t.param(s, "c.b"), 3);
                let l = t.mse_mean(out, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
    }

    #[test]
    fn one_by_one_conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_raw("x", randn(&[3, 2, 2], &mut rng));
        store.add_conv("c", 2, 3, 1, &mut rng);
        let target = randn(&[2, 2, 2], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["x", "c.w"],
            |s| {
                let t = Tape::new();
                let out = t.conv2d(t.param(s, "x"), t.param(s, "c.w"), t.param(s, "c.b"), 1);
                let l = t.mse_mean(out, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
    }

    #[test]
    fn activations_and_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add_raw("x", randn(&[4, 3, 3], &mut rng));
        store.add_norm("n", 4);
        let target = randn(&[4, 3, 3], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["x", "n.g", "n.beta"],
            |s| {
                let t = Tape::new();
                let x = t.param(s, "x");
                let n = t.group_norm(x, t.param(s, "n.g"), t.param(s, "n.beta"), 2);
                let y = t.silu(n);
                let z = t.leaky_relu(y, 0.01);
                let l = t.mse_mean(z, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-4,
        );
    }

    #[test]
    fn pool_upsample_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add_raw("x", randn(&[2, 4, 4], &mut rng));
        store.add_raw("y", randn(&[1, 2, 2], &mut rng));
        let target = randn(&[3, 4, 4], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["x", "y"],
            |s| {
                let t = Tape::new();
                let x = t.param(s, "x");
                let y = t.param(s, "y");
                let down = t.avg_pool2(x);
                let cat = t.concat_c(&[down, y]);
                let up = t.up_nearest2(cat);
                let l = t.mse_mean(up, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_grads_and_constant_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        store.add_raw("x", randn(&[2, 3, 3], &mut rng));
        let target = randn(&[2, 12, 12], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["x"],
            |s| {
                let t = Tape::new();
                let up = t.up_bilinear(t.param(s, "x"), 4);
                let l = t.mse_mean(up, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
        // Interpolation weights sum to 1: constants stay constant.
        let t = Tape::new();
        let c = t.input3(Array3::from_elem((1, 2, 2), 3.25));
        let up = t.up_bilinear(c, 8);
        assert!(t.value3(up).iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn matvec_and_chan_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add_linear("l", 3, 5, &mut rng);
        store.add_raw("e", randn(&[5], &mut rng));
        store.add_raw("x", randn(&[3, 2, 2], &mut rng));
        let target = randn(&[3, 2, 2], &mut rng)
            .into_dimensionality::<Ix3>()
            .unwrap();
        check_grads(
            &mut store,
            &["l.w", "l.b", "e", "x"],
            |s| {
                let t = Tape::new();
                let e = t.param(s, "e");
                let v = t.add(t.matvec(t.param(s, "l.w"), e), t.param(s, "l.b"));
                let x = t.add_chan_bias(t.param(s, "x"), v);
                let l = t.mse_mean(x, t.input3(target.clone()));
                (t.scalar(l), t.backward(l))
            },
            1e-5,
        );
    }

    #[test]
    fn ce_and_dice_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        store.add_raw("z", randn(&[3, 4, 4], &mut rng));
        let mut target = Array3::zeros((3, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                target[[rng.random_range(0..3), y, x]] = 1.0;
            }
        }
        let mut weights = Array2::zeros((4, 4));
        for y in 0..4 {
            for x in 0..4 {
                weights[[y, x]] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            }
        }
        let t2 = target.clone();
        check_grads(
            &mut store,
            &["z"],
            |s| {
                let t = Tape::new();
                let z = t.param(s, "z");
                let ce = t.ce_mean(z, t2.clone(), None);
                let cew = t.ce_mean(z, t2.clone(), Some(weights.clone()));
                let dice = t.soft_dice(z, t2.clone(), 1e-5);
                let l = t.add(t.add(ce, cew), dice);
                (t.scalar(l), t.backward(l))
            },
            1e-4,
        );
        // All-zero weights: loss contribution 0, gradient 0.
        let t = Tape::new();
        let z = t.param(&store, "z");
        let l = t.ce_mean(z, target, Some(Array2::zeros((4, 4))));
        assert_eq!(t.scalar(l), 0.0);
        assert!(t.backward(l).is_empty());
    }

    #[test]
    fn shared_param_accumulates_once_per_use() {
        let mut store = ParamStore::new();
        store.add_raw("a", ArrayD::from_elem(IxDyn(&[1, 1, 1]), 2.0));
        let t = Tape::new();
        let a1 = t.param(&store, "a");
        let a2 = t.param(&store, "a");
        assert_eq!(a1, a2);
        let zero = t.input3(Array3::zeros((1, 1, 1)));
        // loss = mean((a + a − 0)²) = (2a)² → d/da = 8a = 16.
        let l = t.mse_mean(t.add(a1, a2), zero);
        let g = t.backward(l);
        let ga = *g.get("a").unwrap().iter().next().unwrap();
        assert!((ga - 16.0).abs() < 1e-12);
    }

    #[test]
    fn detach_stops_gradients() {
        let mut store = ParamStore::new();
        store.add_raw("a", ArrayD::from_elem(IxDyn(&[1, 1, 1]), 3.0));
        let t = Tape::new();
        let a = t.param(&store, "a");
        let d = t.detach(a);
        let l = t.mse_mean(d, t.input3(Array3::zeros((1, 1, 1))));
        assert!(t.backward(l).is_empty());
    }

    #[test]
    fn softmax_ce_matches_uniform_entropy() {
        let t = Tape::new();
        let z = t.input3(Array3::zeros((2, 2, 2)));
        let mut target = Array3::zeros((2, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                target[[0, y, x]] = 1.0;
            }
        }
        let l = t.ce_mean(z, target, None);
        assert!((t.scalar(l) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.add_norm("n", 4);
        let t = Tape::new();
        let x = t.input(randn(&[4, 5, 5], &mut rng) * 3.0 + 1.0);
        let n = t.group_norm(x, t.param(&store, "n.g"), t.param(&store, "n.beta"), 4);
        let out = t.value3(n);
        for c in 0..4 {
            let plane = out.index_axis(ndarray::Axis(0), c);
            let mean = plane.sum() / 25.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn matvec_value() {
        let t = Tape::new();
        let w = t.input(
            Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap()
                .into_dyn(),
        );
        let x = t.input1(arr1(&[1.0, 0.0, -1.0]));
        let y = t.matvec(w, x);
        assert_eq!(t.value(y).as_slice().unwrap(), &[-2.0, -2.0]);
    }
}
