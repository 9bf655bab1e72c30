use crate::autograd::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `x[b, in] * w[in, out] + bias[out]`
pub fn dense<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, bias)
}

/// Squeeze-and-excitation over `x[b, C, S]`: per-channel average, a
/// `C -> C/r -> C` bottleneck gated by a sigmoid, then channel rescaling.
/// `w1` is `[C, C/r]`, `w2` is `[C/r, C]`; neither carries a bias.
pub fn se_block<T: Real>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let channels = match g.shape(x) {
        [_, c, _] => *c,
        other => {
            return Err(Error::Shape(format!(
                "se_block expects [b, C, S], got {other:?}"
            )))
        }
    };
    if g.shape(w1).first() != Some(&channels) || g.shape(w2).last() != Some(&channels) {
        return Err(Error::Shape(format!(
            "excitation weights {:?}/{:?} do not match {channels} channels",
            g.shape(w1),
            g.shape(w2)
        )));
    }
    let squeeze = g.channel_mean(x)?;
    let hidden = g.matmul(squeeze, w1)?;
    let hidden = g.relu(hidden);
    let gates = g.matmul(hidden, w2)?;
    let gates = g.sigmoid(gates);
    g.channel_scale(x, gates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_out_side(side: usize, kernel: usize, stride: usize) -> usize {
    (side + 2 * (kernel / 2) - kernel) / stride + 1
}

struct Conv2dOp {
    geom: Conv2dGeom,
}

impl Conv2dGeom {
    fn in_index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.in_ch + c) * self.height + y) * self.width + x
    }

    fn out_index(&self, b: usize, o: usize, y: usize, x: usize) -> usize {
        ((b * self.out_ch + o) * self.out_h + y) * self.out_w + x
    }

    fn w_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + c) * self.kernel + ky) * self.kernel + kx
    }

    /// Visits every (output, input, weight) index triple that contributes.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for o in 0..self.out_ch {
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        let oi = self.out_index(b, o, oy, ox);
                        for c in 0..self.in_ch {
                            for ky in 0..self.kernel {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.height as isize {
                                    continue;
                                }
                                for kx in 0..self.kernel {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= self.width as isize {
                                        continue;
                                    }
                                    let ii = self.in_index(b, c, iy as usize, ix as usize);
                                    f(oi, ii, self.w_index(o, c, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> CustomOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w, bias) = (inputs[0], inputs[1], inputs[2]);
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        let gd = g.data();
        {
            let (dxd, dwd) = (dx.data_mut(), dw.data_mut());
            self.geom.for_each_tap(|oi, ii, wi| {
                dxd[ii] = dxd[ii] + gd[oi] * w.data()[wi];
                dwd[wi] = dwd[wi] + gd[oi] * x.data()[ii];
            });
        }
        let plane = self.geom.out_h * self.geom.out_w;
        let mut db = Tensor::zeros(bias.shape());
        for (k, chunk) in gd.chunks(plane).enumerate() {
            let o = k % self.geom.out_ch;
            db.data_mut()[o] = db.data()[o] + chunk.iter().copied().sum::<T>();
        }
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// Same-padded square convolution: `x[b, Cin, H, W]`, `w[Cout, Cin, k, k]`, `bias[Cout]`.
pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
        return Err(Error::Shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
    }
    if g.value(bias).numel() != ws[0] {
        return Err(Error::Shape(format!("conv2d bias must have {} entries", ws[0])));
    }
    let kernel = ws[2];
    let geom = Conv2dGeom {
        batch: xs[0],
        in_ch: xs[1],
        out_ch: ws[0],
        height: xs[2],
        width: xs[3],
        kernel,
        stride,
        pad: kernel / 2,
        out_h: conv_out_side(xs[2], kernel, stride),
        out_w: conv_out_side(xs[3], kernel, stride),
    };
    let (tx, tw, tb) = (g.value(x), g.value(w), g.value(bias));
    let plane = geom.out_h * geom.out_w;
    let mut out = Tensor::from_fn(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], |i| {
        tb.data()[(i / plane) % geom.out_ch]
    });
    {
        let od = out.data_mut();
        geom.for_each_tap(|oi, ii, wi| od[oi] = od[oi] + tx.data()[ii] * tw.data()[wi]);
    }
    Ok(g.custom(&[x, w, bias], out, Conv2dOp { geom }))
}
