//! Reverse-mode autodiff over a flat tape.
//!
//! Every tensor lives in one `Graph` as an [`ArrayD<f64>`]; operations push
//! nodes and return [`Var`] handles. `backward` walks the tape in reverse and
//! accumulates gradients into the leaves. The op set is deliberately small:
//! generic dense ops for the network plus a few fused ops for the body model
//! (Rodrigues rotations, kinematic chain, skinning) where an analytic
//! backward pass is both faster and easier to verify than a composition.

use std::sync::Arc;

use ndarray::{
    Array1, Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn,
};

use crate::sparse::SparseMatrix;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const ROD_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    /// a + c * b
    AddScaled(Var, Var, f64),
    /// matrix + broadcast row vector
    AddRow(Var, Var),
    /// matrix * broadcast row vector
    MulRow(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    MeanRows(Var),
    MeanAll(Var),
    /// mean |a - b|
    L1Mean(Var, Var),
    /// 1-D row repeated t times
    RepeatRow(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        ksize: usize,
        stride: usize,
        pad: usize,
    },
    AvgPoolGrid {
        x: Var,
        oh: usize,
        ow: usize,
    },
    /// rows of axis-angle (j,3) -> rows of row-major rotations (j,9)
    Rodrigues(Var),
    /// local rotations (j,9) -> world transforms (j,12) as [R | t]
    ChainTransforms {
        rot: Var,
        parents: Arc<Vec<i32>>,
        rest_joints: Arc<Array2<f64>>,
    },
    /// world transforms -> skinning transforms, t' = t - R * rest_joint
    SkinAdjust {
        chain: Var,
        rest_joints: Arc<Array2<f64>>,
    },
    /// per-vertex transforms (m,12) applied to points (m,3)
    ApplyVertexTransforms(Var, Var),
    /// joints (k,3) + camera [s,tx,ty] -> pixel coords (k,2)
    WeakPerspective(Var, Var),
    /// constant sparse matrix times dense variable
    SpMatMul {
        m: Arc<SparseMatrix>,
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::L1Mean(a, b)
            | Op::ConcatRows(a, b)
            | Op::ConcatCols(a, b)
            | Op::AddScaled(a, b, _)
            | Op::ApplyVertexTransforms(a, b)
            | Op::WeakPerspective(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a)
            | Op::MeanRows(a)
            | Op::MeanAll(a)
            | Op::RepeatRow(a)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Rodrigues(a)
            | Op::AvgPoolGrid { x: a, .. }
            | Op::ChainTransforms { rot: a, .. }
            | Op::SkinAdjust { chain: a, .. }
            | Op::SpMatMul { x: a, .. } => vec![a],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Flat autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf => false, // set explicitly by leaf()
            ref op => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn constant1(&mut self, value: Array1<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d value")
    }

    pub fn value3(&self, v: Var) -> ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d value")
    }

    pub fn value1(&self, v: Var) -> ndarray::ArrayView1<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected 1-d value")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar value");
        *val.iter().next().unwrap()
    }

    /// Gradient accumulated in the last `backward` call. Retained on leaves;
    /// interior nodes release theirs as the sweep passes them.
    pub fn grad(&self, v: Var) -> Option<ArrayViewD<'_, f64>> {
        self.nodes[v.0].grad.as_ref().map(|g| g.view())
    }

    // ---- generic dense ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let bv = self.value2(b);
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
            av.dot(&bv)
        };
        self.push(out.into_dyn(), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            av + bv
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
            av - bv
        };
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "mul_elem shape mismatch");
            av * bv
        };
        self.push(out, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.nodes[a.0].value * c;
        self.push(out, Op::Scale(a, c))
    }

    /// `a + c * b`
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "add_scaled shape mismatch");
            av + &(bv * c)
        };
        self.push(out, Op::AddScaled(a, b, c))
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let rv = self.value1(row);
            assert_eq!(av.ncols(), rv.len(), "add_row width mismatch");
            &av + &rv
        };
        self.push(out.into_dyn(), Op::AddRow(a, row))
    }

    /// Matrix times a row vector broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let rv = self.value1(row);
            assert_eq!(av.ncols(), rv.len(), "mul_row width mismatch");
            &av * &rv
        };
        self.push(out.into_dyn(), Op::MulRow(a, row))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let mut out = av.to_owned();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out
        };
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let mut out = av.to_owned();
            for mut row in out.rows_mut() {
                let n = row.len() as f64;
                let mean = row.sum() / n;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|x| (x - mean) * inv);
            }
            out
        };
        self.push(out.into_dyn(), Op::LayerNormRows(a))
    }

    /// Column means: (m,n) -> (n,)
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = {
            let av = self.value2(a);
            av.mean_axis(Axis(0)).expect("mean over empty axis")
        };
        self.push(out.into_dyn(), Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mean = v.sum() / v.len() as f64;
        self.push(ndarray::arr0(mean).into_dyn(), Op::MeanAll(a))
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "l1_mean shape mismatch");
            let sum: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y).abs()).sum();
            sum / av.len() as f64
        };
        self.push(ndarray::arr0(out).into_dyn(), Op::L1Mean(a, b))
    }

    /// 1-D vector repeated as t identical rows.
    pub fn repeat_row(&mut self, a: Var, t: usize) -> Var {
        let out = {
            let av = self.value1(a);
            let mut out = Array2::zeros((t, av.len()));
            for mut row in out.rows_mut() {
                row.assign(&av);
            }
            out
        };
        self.push(out.into_dyn(), Op::RepeatRow(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let bv = self.value2(b);
            assert_eq!(av.ncols(), bv.ncols(), "concat_rows width mismatch");
            ndarray::concatenate(Axis(0), &[av, bv]).unwrap()
        };
        self.push(out.into_dyn(), Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = self.value2(a);
            let bv = self.value2(b);
            assert_eq!(av.nrows(), bv.nrows(), "concat_cols height mismatch");
            ndarray::concatenate(Axis(1), &[av, bv]).unwrap()
        };
        self.push(out.into_dyn(), Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let av = self.value2(a);
            assert!(start + len <= av.nrows(), "slice_rows out of range");
            av.slice(ndarray::s![start..start + len, ..]).to_owned()
        };
        self.push(out.into_dyn(), Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let av = self.value2(a);
            assert!(start + len <= av.ncols(), "slice_cols out of range");
            av.slice(ndarray::s![.., start..start + len]).to_owned()
        };
        self.push(out.into_dyn(), Op::SliceCols(a, start, len))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = {
            let av = &self.nodes[a.0].value;
            assert_eq!(
                av.len(),
                shape.iter().product::<usize>(),
                "reshape element count mismatch"
            );
            av.to_shape(IxDyn(shape)).unwrap().to_owned()
        };
        self.push(out, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value2(a).t().to_owned();
        self.push(out.into_dyn(), Op::Transpose(a))
    }

    /// `w (m,n) . x (n) + b (m)`
    pub fn affine_vec(&mut self, w: Var, x: Var, b: Var) -> Var {
        let n = self.value1(x).len();
        let xc = self.reshape(x, &[n, 1]);
        let prod = self.matmul(w, xc);
        let m = self.value2(prod).nrows();
        let flat = self.reshape(prod, &[m]);
        self.add(flat, b)
    }

    /// Spatial mean of a (c,h,w) feature map -> (c,)
    pub fn pool_spatial_mean(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value3(a).dim();
        let flat = self.reshape(a, &[c, h * w]);
        let t = self.transpose(flat);
        self.mean_rows(t)
    }

    // ---- fused ops ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let out = {
            let xv = self.value3(x);
            let wv = self.value2(w);
            let bv = self.value1(b);
            let (cin, _, _) = xv.dim();
            assert_eq!(wv.ncols(), cin * ksize * ksize, "conv kernel width mismatch");
            assert_eq!(bv.len(), wv.nrows(), "conv bias length mismatch");
            let (col, oh, ow) = im2col(&xv, ksize, stride, pad);
            let out2 = col.dot(&wv.t()); // (oh*ow, cout)
            let cout = wv.nrows();
            let mut out = ndarray::Array3::zeros((cout, oh, ow));
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..cout {
                        out[[c, i, j]] = out2[[i * ow + j, c]] + bv[c];
                    }
                }
            }
            out
        };
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                ksize,
                stride,
                pad,
            },
        )
    }

    /// Adaptive average pool of (c,h,w) to a fixed (c,oh,ow) grid.
    pub fn avg_pool_grid(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = {
            let xv = self.value3(x);
            let (c, h, w) = xv.dim();
            assert!(h >= oh && w >= ow, "pool output larger than input");
            let mut out = ndarray::Array3::zeros((c, oh, ow));
            for ci in 0..c {
                for i in 0..oh {
                    let (ys, ye) = pool_bin(i, oh, h);
                    for j in 0..ow {
                        let (xs, xe) = pool_bin(j, ow, w);
                        let mut acc = 0.0;
                        for y in ys..ye {
                            for xx in xs..xe {
                                acc += xv[[ci, y, xx]];
                            }
                        }
                        out[[ci, i, j]] = acc / ((ye - ys) * (xe - xs)) as f64;
                    }
                }
            }
            out
        };
        self.push(out.into_dyn(), Op::AvgPoolGrid { x, oh, ow })
    }

    /// Axis-angle rows (j,3) -> row-major rotation rows (j,9).
    pub fn rodrigues(&mut self, w: Var) -> Var {
        let out = {
            let wv = self.value2(w);
            assert_eq!(wv.ncols(), 3, "rodrigues expects (j,3)");
            let mut out = Array2::zeros((wv.nrows(), 9));
            for (i, row) in wv.rows().into_iter().enumerate() {
                let r = rodrigues_rowmajor([row[0], row[1], row[2]]);
                for k in 0..9 {
                    out[[i, k]] = r[k];
                }
            }
            out
        };
        self.push(out.into_dyn(), Op::Rodrigues(w))
    }

    /// Compose local rotations down the kinematic tree.
    ///
    /// `rot` holds row-major local rotations (j,9); output rows are the world
    /// transforms `[R | t]` flattened to 12 values. Parents must precede
    /// children in index order.
    pub fn chain_transforms(
        &mut self,
        rot: Var,
        parents: Arc<Vec<i32>>,
        rest_joints: Arc<Array2<f64>>,
    ) -> Var {
        let out = {
            let rv = self.value2(rot);
            let j = rv.nrows();
            assert_eq!(rv.ncols(), 9, "chain expects (j,9) rotations");
            assert_eq!(parents.len(), j, "parents length mismatch");
            assert_eq!(rest_joints.dim(), (j, 3), "rest joint shape mismatch");
            let mut world_r = vec![[0.0f64; 9]; j];
            let mut world_t = vec![[0.0f64; 3]; j];
            for jj in 0..j {
                let local: [f64; 9] = std::array::from_fn(|k| rv[[jj, k]]);
                let p = parents[jj];
                if p < 0 {
                    world_r[jj] = local;
                    world_t[jj] = [
                        rest_joints[[jj, 0]],
                        rest_joints[[jj, 1]],
                        rest_joints[[jj, 2]],
                    ];
                } else {
                    let p = p as usize;
                    assert!(p < jj, "parent must precede child");
                    world_r[jj] = mat3_mul(&world_r[p], &local);
                    let off = [
                        rest_joints[[jj, 0]] - rest_joints[[p, 0]],
                        rest_joints[[jj, 1]] - rest_joints[[p, 1]],
                        rest_joints[[jj, 2]] - rest_joints[[p, 2]],
                    ];
                    let rot_off = mat3_vec(&world_r[p], &off);
                    world_t[jj] = [
                        world_t[p][0] + rot_off[0],
                        world_t[p][1] + rot_off[1],
                        world_t[p][2] + rot_off[2],
                    ];
                }
            }
            let mut out = Array2::zeros((j, 12));
            for jj in 0..j {
                for k in 0..9 {
                    out[[jj, k]] = world_r[jj][k];
                }
                for k in 0..3 {
                    out[[jj, 9 + k]] = world_t[jj][k];
                }
            }
            out
        };
        self.push(
            out.into_dyn(),
            Op::ChainTransforms {
                rot,
                parents,
                rest_joints,
            },
        )
    }

    /// Convert world transforms to skinning transforms:
    /// `t' = t - R * rest_joint` (the inverse rest translation folded in).
    pub fn skin_adjust(&mut self, chain: Var, rest_joints: Arc<Array2<f64>>) -> Var {
        let out = {
            let cv = self.value2(chain);
            let j = cv.nrows();
            assert_eq!(cv.ncols(), 12, "skin_adjust expects (j,12)");
            assert_eq!(rest_joints.dim(), (j, 3), "rest joint shape mismatch");
            let mut out = cv.to_owned();
            for jj in 0..j {
                let r: [f64; 9] = std::array::from_fn(|k| cv[[jj, k]]);
                let rj = [
                    rest_joints[[jj, 0]],
                    rest_joints[[jj, 1]],
                    rest_joints[[jj, 2]],
                ];
                let rr = mat3_vec(&r, &rj);
                for k in 0..3 {
                    out[[jj, 9 + k]] = cv[[jj, 9 + k]] - rr[k];
                }
            }
            out
        };
        self.push(out.into_dyn(), Op::SkinAdjust { chain, rest_joints })
    }

    /// Apply per-vertex affine transforms: rows `[L | o]` of `t` map the
    /// matching row of `v` to `L*v + o`.
    pub fn apply_vertex_transforms(&mut self, t: Var, v: Var) -> Var {
        let out = {
            let tv = self.value2(t);
            let vv = self.value2(v);
            assert_eq!(tv.ncols(), 12, "transforms must be (m,12)");
            assert_eq!(vv.ncols(), 3, "points must be (m,3)");
            assert_eq!(tv.nrows(), vv.nrows(), "row count mismatch");
            let mut out = Array2::zeros((vv.nrows(), 3));
            for i in 0..vv.nrows() {
                let l: [f64; 9] = std::array::from_fn(|k| tv[[i, k]]);
                let p = [vv[[i, 0]], vv[[i, 1]], vv[[i, 2]]];
                let lp = mat3_vec(&l, &p);
                for k in 0..3 {
                    out[[i, k]] = lp[k] + tv[[i, 9 + k]];
                }
            }
            out
        };
        self.push(out.into_dyn(), Op::ApplyVertexTransforms(t, v))
    }

    /// Weak-perspective projection: `[s*x + tx, s*y + ty]` per joint.
    pub fn weak_perspective(&mut self, joints: Var, camera: Var) -> Var {
        let out = {
            let jv = self.value2(joints);
            let cv = self.value1(camera);
            assert_eq!(jv.ncols(), 3, "joints must be (k,3)");
            assert_eq!(cv.len(), 3, "camera must be [s,tx,ty]");
            let (s, tx, ty) = (cv[0], cv[1], cv[2]);
            let mut out = Array2::zeros((jv.nrows(), 2));
            for k in 0..jv.nrows() {
                out[[k, 0]] = s * jv[[k, 0]] + tx;
                out[[k, 1]] = s * jv[[k, 1]] + ty;
            }
            out
        };
        self.push(out.into_dyn(), Op::WeakPerspective(joints, camera))
    }

    /// Constant sparse matrix times a dense variable.
    pub fn spmat_mul(&mut self, m: Arc<SparseMatrix>, x: Var) -> Var {
        let out = {
            let xv = self.value2(x).to_owned();
            m.apply(&xv)
        };
        self.push(out.into_dyn(), Op::SpMatMul { m, x })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients land on the leaves.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        let shape = self.nodes[root.0].value.raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::ones(shape));

        let mut contributions: Vec<(usize, ArrayD<f64>)> = Vec::new();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf grads
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            contributions.clear();
            self.backward_step(i, &g, &mut contributions);
            for (idx, c) in contributions.drain(..) {
                if !self.nodes[idx].requires_grad {
                    continue;
                }
                match self.nodes[idx].grad.as_mut() {
                    Some(acc) => *acc += &c,
                    None => self.nodes[idx].grad = Some(c),
                }
            }
        }
    }

    fn backward_step(&self, i: usize, g: &ArrayD<f64>, out: &mut Vec<(usize, ArrayD<f64>)>) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value2(a);
                let bv = self.value2(b);
                out.push((a.0, g2.dot(&bv.t()).into_dyn()));
                out.push((b.0, av.t().dot(&g2).into_dyn()));
            }
            Op::Add(a, b) => {
                out.push((a.0, g.clone()));
                out.push((b.0, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((a.0, g.clone()));
                out.push((b.0, -g));
            }
            Op::MulElem(a, b) => {
                out.push((a.0, g * &self.nodes[b.0].value));
                out.push((b.0, g * &self.nodes[a.0].value));
            }
            Op::Scale(a, c) => {
                out.push((a.0, g * c));
            }
            Op::AddScaled(a, b, c) => {
                out.push((a.0, g.clone()));
                out.push((b.0, g * c));
            }
            Op::AddRow(a, row) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                out.push((a.0, g.clone()));
                out.push((row.0, g2.sum_axis(Axis(0)).into_dyn()));
            }
            Op::MulRow(a, row) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value2(a);
                let rv = self.value1(row);
                out.push((a.0, (&g2 * &rv).into_dyn()));
                out.push((row.0, (&g2 * &av).sum_axis(Axis(0)).into_dyn()));
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let mut d = av.clone();
                d.zip_mut_with(g, |x, gg| *x = gelu_grad_scalar(*x) * gg);
                out.push((a.0, d));
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| y[[r, c]] * g2[[r, c]]).sum();
                    for c in 0..y.ncols() {
                        d[[r, c]] = y[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                out.push((a.0, d.into_dyn()));
            }
            Op::LayerNormRows(a) => {
                let av = self.value2(a);
                let xh = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let n = av.ncols() as f64;
                let mut d = Array2::zeros(av.raw_dim());
                for r in 0..av.nrows() {
                    let mean = av.row(r).sum() / n;
                    let var = av
                        .row(r)
                        .iter()
                        .map(|x| (x - mean) * (x - mean))
                        .sum::<f64>()
                        / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gmean = g2.row(r).sum() / n;
                    let gx: f64 = (0..av.ncols())
                        .map(|c| g2[[r, c]] * xh[[r, c]])
                        .sum::<f64>()
                        / n;
                    for c in 0..av.ncols() {
                        d[[r, c]] = inv * (g2[[r, c]] - gmean - xh[[r, c]] * gx);
                    }
                }
                out.push((a.0, d.into_dyn()));
            }
            Op::MeanRows(a) => {
                let av = self.value2(a);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let m = av.nrows() as f64;
                let mut d = Array2::zeros(av.raw_dim());
                for mut row in d.rows_mut() {
                    row.assign(&(&g1 / m));
                }
                out.push((a.0, d.into_dyn()));
            }
            Op::MeanAll(a) => {
                let av = &self.nodes[a.0].value;
                let gv = *g.iter().next().unwrap();
                out.push((a.0, ArrayD::from_elem(av.raw_dim(), gv / av.len() as f64)));
            }
            Op::L1Mean(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let gv = *g.iter().next().unwrap();
                let scale = gv / av.len() as f64;
                let mut da = av.clone();
                da.zip_mut_with(bv, |x, y| {
                    *x = scale * sign_zero(*x - *y);
                });
                out.push((b.0, -&da));
                out.push((a.0, da));
            }
            Op::RepeatRow(a) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                out.push((a.0, g2.sum_axis(Axis(0)).into_dyn()));
            }
            Op::ConcatRows(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let na = self.value2(a).nrows();
                out.push((a.0, g2.slice(ndarray::s![..na, ..]).to_owned().into_dyn()));
                out.push((b.0, g2.slice(ndarray::s![na.., ..]).to_owned().into_dyn()));
            }
            Op::ConcatCols(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let na = self.value2(a).ncols();
                out.push((a.0, g2.slice(ndarray::s![.., ..na]).to_owned().into_dyn()));
                out.push((b.0, g2.slice(ndarray::s![.., na..]).to_owned().into_dyn()));
            }
            Op::SliceRows(a, start, len) => {
                let av = self.value2(a);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::zeros(av.raw_dim());
                d.slice_mut(ndarray::s![start..start + len, ..]).assign(&g2);
                out.push((a.0, d.into_dyn()));
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value2(a);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::zeros(av.raw_dim());
                d.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                out.push((a.0, d.into_dyn()));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                out.push((a.0, g.to_shape(shape).unwrap().to_owned()));
            }
            Op::Transpose(a) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                out.push((a.0, g2.t().as_standard_layout().into_owned().into_dyn()));
            }
            Op::Conv2d {
                x,
                w,
                b,
                ksize,
                stride,
                pad,
            } => {
                let xv = self.value3(x);
                let wv = self.value2(w);
                let (cin, h, wid) = xv.dim();
                let cout = wv.nrows();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, oh, ow) = g3.dim();
                let mut g2 = Array2::zeros((oh * ow, cout));
                for c in 0..cout {
                    for i2 in 0..oh {
                        for j2 in 0..ow {
                            g2[[i2 * ow + j2, c]] = g3[[c, i2, j2]];
                        }
                    }
                }
                let (col, _, _) = im2col(&xv, ksize, stride, pad);
                let dw = g2.t().dot(&col);
                let db = g2.sum_axis(Axis(0));
                let dcol = g2.dot(&wv);
                let mut dx = ndarray::Array3::<f64>::zeros((cin, h, wid));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let r = oy * ow + ox;
                        for c in 0..cin {
                            for dy in 0..ksize {
                                for dxk in 0..ksize {
                                    let y = (oy * stride + dy) as isize - pad as isize;
                                    let xx = (ox * stride + dxk) as isize - pad as isize;
                                    if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < wid
                                    {
                                        dx[[c, y as usize, xx as usize]] +=
                                            dcol[[r, c * ksize * ksize + dy * ksize + dxk]];
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((x.0, dx.into_dyn()));
                out.push((w.0, dw.into_dyn()));
                out.push((b.0, db.into_dyn()));
            }
            Op::AvgPoolGrid { x, oh, ow } => {
                let xv = self.value3(x);
                let (c, h, w) = xv.dim();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i2 in 0..oh {
                        let (ys, ye) = pool_bin(i2, oh, h);
                        for j2 in 0..ow {
                            let (xs, xe) = pool_bin(j2, ow, w);
                            let share = g3[[ci, i2, j2]] / ((ye - ys) * (xe - xs)) as f64;
                            for y in ys..ye {
                                for xx in xs..xe {
                                    dx[[ci, y, xx]] += share;
                                }
                            }
                        }
                    }
                }
                out.push((x.0, dx.into_dyn()));
            }
            Op::Rodrigues(w) => {
                let wv = self.value2(w);
                let rv = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::zeros(wv.raw_dim());
                for r in 0..wv.nrows() {
                    let axis = [wv[[r, 0]], wv[[r, 1]], wv[[r, 2]]];
                    let rot: [f64; 9] = std::array::from_fn(|k| rv[[r, k]]);
                    let grow: [f64; 9] = std::array::from_fn(|k| g2[[r, k]]);
                    let dw = rodrigues_backward(&axis, &rot, &grow);
                    for k in 0..3 {
                        d[[r, k]] = dw[k];
                    }
                }
                out.push((w.0, d.into_dyn()));
            }
            Op::ChainTransforms {
                rot,
                parents,
                rest_joints,
            } => {
                let rv = self.value2(rot);
                let world = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let j = rv.nrows();
                let mut d_world_r = vec![[0.0f64; 9]; j];
                let mut d_world_t = vec![[0.0f64; 3]; j];
                for jj in 0..j {
                    for k in 0..9 {
                        d_world_r[jj][k] = g2[[jj, k]];
                    }
                    for k in 0..3 {
                        d_world_t[jj][k] = g2[[jj, 9 + k]];
                    }
                }
                let mut d_local = Array2::zeros((j, 9));
                for jj in (0..j).rev() {
                    let p = parents[jj];
                    if p < 0 {
                        for k in 0..9 {
                            d_local[[jj, k]] = d_world_r[jj][k];
                        }
                    } else {
                        let p = p as usize;
                        let local: [f64; 9] = std::array::from_fn(|k| rv[[jj, k]]);
                        let parent_r: [f64; 9] = std::array::from_fn(|k| world[[p, k]]);
                        let off = [
                            rest_joints[[jj, 0]] - rest_joints[[p, 0]],
                            rest_joints[[jj, 1]] - rest_joints[[p, 1]],
                            rest_joints[[jj, 2]] - rest_joints[[p, 2]],
                        ];
                        // Rw_j = Rw_p R_j  =>  dRw_p += dRw_j R_jᵀ and dR_j = Rw_pᵀ dRw_j
                        let d_rw = d_world_r[jj];
                        let d_parent = mat3_mul(&d_rw, &mat3_transpose(&local));
                        let d_loc = mat3_mul(&mat3_transpose(&parent_r), &d_rw);
                        for k in 0..9 {
                            d_world_r[p][k] += d_parent[k];
                            d_local[[jj, k]] = d_loc[k];
                        }
                        // t_j = Rw_p off + t_p
                        let dt = d_world_t[jj];
                        for a2 in 0..3 {
                            for b2 in 0..3 {
                                d_world_r[p][a2 * 3 + b2] += dt[a2] * off[b2];
                            }
                            d_world_t[p][a2] += dt[a2];
                        }
                    }
                }
                out.push((rot.0, d_local.into_dyn()));
            }
            Op::SkinAdjust { chain, rest_joints } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let j = g2.nrows();
                let mut d = g2.to_owned();
                for jj in 0..j {
                    let rj = [
                        rest_joints[[jj, 0]],
                        rest_joints[[jj, 1]],
                        rest_joints[[jj, 2]],
                    ];
                    // t' = t - R rj  =>  dR[a,b] -= dt'[a] rj[b]
                    for a2 in 0..3 {
                        let gt = g2[[jj, 9 + a2]];
                        for b2 in 0..3 {
                            d[[jj, a2 * 3 + b2]] -= gt * rj[b2];
                        }
                    }
                }
                out.push((chain.0, d.into_dyn()));
            }
            Op::ApplyVertexTransforms(t, v) => {
                let tv = self.value2(t);
                let vv = self.value2(v);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let m = vv.nrows();
                let mut dt = Array2::zeros((m, 12));
                let mut dv = Array2::zeros((m, 3));
                for r in 0..m {
                    for a2 in 0..3 {
                        let ga = g2[[r, a2]];
                        dt[[r, 9 + a2]] = ga;
                        for b2 in 0..3 {
                            dt[[r, a2 * 3 + b2]] = ga * vv[[r, b2]];
                            dv[[r, b2]] += tv[[r, a2 * 3 + b2]] * ga;
                        }
                    }
                }
                out.push((t.0, dt.into_dyn()));
                out.push((v.0, dv.into_dyn()));
            }
            Op::WeakPerspective(joints, camera) => {
                let jv = self.value2(joints);
                let cv = self.value1(camera);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let s = cv[0];
                let mut dj = Array2::zeros(jv.raw_dim());
                let mut dc = Array1::zeros(3);
                for k in 0..jv.nrows() {
                    let (g0, g1) = (g2[[k, 0]], g2[[k, 1]]);
                    dj[[k, 0]] = s * g0;
                    dj[[k, 1]] = s * g1;
                    dc[0] += jv[[k, 0]] * g0 + jv[[k, 1]] * g1;
                    dc[1] += g0;
                    dc[2] += g1;
                }
                out.push((joints.0, dj.into_dyn()));
                out.push((camera.0, dc.into_dyn()));
            }
            Op::SpMatMul { m, x } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                out.push((x.0, m.apply_transpose(&g2).into_dyn()));
            }
        }
    }
}

// ---- scalar helpers ----

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pool_bin(i: usize, out: usize, full: usize) -> (usize, usize) {
    let s = i * full / out;
    let e = (i + 1) * full / out;
    (s, e.max(s + 1))
}

fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (cin, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((oh * ow, cin * k * k));
    for oy in 0..oh {
        for ox in 0..ow {
            let r = oy * ow + ox;
            for c in 0..cin {
                for dy in 0..k {
                    for dx in 0..k {
                        let y = (oy * stride + dy) as isize - pad as isize;
                        let xx = (ox * stride + dx) as isize - pad as isize;
                        if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                            col[[r, c * k * k + dy * k + dx]] = x[[c, y as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

pub(crate) fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    out
}

pub(crate) fn mat3_vec(a: &[f64; 9], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

pub(crate) fn mat3_transpose(a: &[f64; 9]) -> [f64; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn skew(v: &[f64; 3]) -> [f64; 9] {
    [0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0]
}

/// Row-major rotation matrix from an axis-angle vector.
pub(crate) fn rodrigues_rowmajor(w: [f64; 3]) -> [f64; 9] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let k = skew(&w);
    let k2 = mat3_mul(&k, &k);
    let mut out = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    if theta2 < ROD_EPS * ROD_EPS {
        for i in 0..9 {
            out[i] += k[i] + 0.5 * k2[i];
        }
    } else {
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        for i in 0..9 {
            out[i] += a * k[i] + b * k2[i];
        }
    }
    out
}

/// Gradient of a scalar loss through one Rodrigues row.
///
/// Closed form dR/dw_i = (w_i [w]x + [w x ((I - R) e_i)]x) / |w|^2 * R,
/// falling back to dR/dw_i = [e_i]x as |w| -> 0.
fn rodrigues_backward(w: &[f64; 3], r: &[f64; 9], g: &[f64; 9]) -> [f64; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    if theta2 < ROD_EPS * ROD_EPS {
        return [
            -g[5] + g[7], // [e0]x has -1 at (1,2) and +1 at (2,1)
            g[2] - g[6],
            -g[1] + g[3],
        ];
    }
    let mut dw = [0.0; 3];
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        // (I - R) e_i = e_i - column i of R
        let col = [r[i], r[3 + i], r[6 + i]];
        let ime = [e[0] - col[0], e[1] - col[1], e[2] - col[2]];
        let c = cross(w, &ime);
        let u = [
            w[i] * w[0] + c[0],
            w[i] * w[1] + c[1],
            w[i] * w[2] + c[2],
        ];
        let m = mat3_mul(&skew(&u), r);
        let mut acc = 0.0;
        for k in 0..9 {
            acc += g[k] * m[k];
        }
        dw[i] = acc / theta2;
    }
    dw
}
