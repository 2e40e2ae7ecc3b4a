//! 2-D convolution as an im2col + matmul tape op.

use ndarray::{Array2, Array3, ArrayView3, Axis, Ix1, Ix3, Ix4};

use super::{Scalar, Var};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col<F: Scalar>(x: &ArrayView3<'_, F>, geo: Geometry) -> Array2<F> {
    let Geometry { cin, h, w, kh, kw, stride, pad, ho, wo } = geo;
    let mut cols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(gcols: &Array2<F>, geo: Geometry) -> Array3<F> {
    let Geometry { cin, h, w, kh, kw, stride, pad, ho, wo } = geo;
    let mut gx = Array3::<F>::zeros((cin, h, w));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    gx
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Convolve a `(cin, h, w)` input with `(cout, cin, kh, kw)` weights plus
    /// a `(cout,)` bias, producing `(cout, ho, wo)`.
    pub fn conv2d(self, weight: Self, bias: Self, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        assert_eq!(x.ndim(), 3, "conv2d input must be (cin, h, w)");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be (cout, cin, kh, kw)");
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(bv.shape(), &[cout], "conv2d: bias shape mismatch");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geo = Geometry { cin, h, w, kh, kw, stride, pad, ho, wo };

        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let cols = im2col(&x3, geo).into_shared();
        let w2 = wv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .into_shared();
        let mut out = w2.dot(&cols);
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &b) in out.outer_iter_mut().zip(b1.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out.into_shape_with_order((cout, ho, wo)).unwrap();

        let (ix, iw, ib) = (self.idx, weight.idx, bias.idx);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g
                    .view()
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap();
                let gw = g2.dot(&cols.t());
                sink(
                    iw,
                    gw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                );
                sink(ib, g2.sum_axis(Axis(1)).into_dyn());
                let gcols = w2.t().dot(&g2);
                sink(ix, col2im(&gcols, geo).into_dyn());
            })),
        )
    }
}

#[allow(dead_code)]
fn weight_view<F: Scalar>(wv: &ndarray::ArrayD<F>) -> ndarray::ArrayView<'_, F, Ix4> {
    wv.view().into_dimensionality::<Ix4>().unwrap()
}
