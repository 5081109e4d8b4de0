use crate::error::{Error, Result};
use crate::kcore::RealGrid;

/// Dense `[batch, channels, height, width]` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks single-channel images into a `[n, 1, h, w]` batch.
    pub fn from_images(images: &[&RealGrid]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot build a tensor from zero images"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            first.check_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor {
            shape: [images.len(), 1, h, w],
            data,
        })
    }

    pub fn from_image(image: &RealGrid) -> Tensor {
        Tensor {
            shape: [1, 1, image.height, image.width],
            data: image.data.clone(),
        }
    }

    /// Channel 0 of batch item `n` as an image.
    pub fn image(&self, n: usize) -> RealGrid {
        let [_, c, h, w] = self.shape;
        let start = n * c * h * w;
        RealGrid {
            height: h,
            width: w,
            data: self.data[start..start + h * w].to_vec(),
        }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Channel concatenation of two tensors with equal batch and spatial size.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape;
    let [nb, cb, hb, wb] = b.shape;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
    }
    Ok(Tensor {
        shape: [n, ca + cb, h, w],
        data,
    })
}

/// Splits a gradient of [`concat_channels`] back into its two parts.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = t.shape;
    let plane = h * w;
    let second = c - first;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * second * plane);
    for i in 0..n {
        let base = i * c * plane;
        a.extend_from_slice(&t.data[base..base + first * plane]);
        b.extend_from_slice(&t.data[base + first * plane..base + c * plane]);
    }
    (
        Tensor {
            shape: [n, first, h, w],
            data: a,
        },
        Tensor {
            shape: [n, second, h, w],
            data: b,
        },
    )
}

/// `x + broadcast(s)` where `s` has a single channel.
pub fn add_broadcast(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape;
    if s.shape != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} onto {:?}",
            s.shape, x.shape
        )));
    }
    let plane = h * w;
    let mut out = x.clone();
    for i in 0..n {
        let src = &s.data[i * plane..(i + 1) * plane];
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for (o, v) in out.data[base..base + plane].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`add_broadcast`] with respect to the broadcast operand.
pub fn reduce_broadcast(dy: &Tensor) -> Tensor {
    let [n, c, h, w] = dy.shape;
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for (o, v) in out.data[i * plane..(i + 1) * plane]
                .iter_mut()
                .zip(&dy.data[base..base + plane])
            {
                *o += v;
            }
        }
    }
    out
}
