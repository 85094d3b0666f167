use super::NetError;
use crate::numeric::Tensor;

fn dims(x: &Tensor) -> Result<(usize, usize, usize), NetError> {
    match *x.shape() {
        [c, h, w] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(NetError::OddSpatial(x.shape().to_vec())),
    }
}

/// Space-to-depth with block size 2: `[C, H, W] → [4C, H/2, W/2]`.
///
/// The 2×2 block at (2y, 2x) of channel c lands in channels 4c..4c+4 in the
/// order top-left, top-right, bottom-left, bottom-right.
pub fn psi_forward(x: &Tensor) -> Result<Tensor, NetError> {
    let (c, h, w) = dims(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    out[((4 * ch + k) * oh + y) * ow + xx] = src[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                }
            }
        }
    }
    Ok(Tensor::new(&[4 * c, oh, ow], out)?)
}

/// Exact inverse of [`psi_forward`].
pub fn psi_inverse(y: &Tensor) -> Result<Tensor, NetError> {
    let &[c4, oh, ow] = y.shape() else {
        return Err(NetError::BadPsiChannels(y.shape().to_vec()));
    };
    if c4 % 4 != 0 || c4 == 0 {
        return Err(NetError::BadPsiChannels(y.shape().to_vec()));
    }
    let (c, h, w) = (c4 / 4, oh * 2, ow * 2);
    let src = y.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    out[(ch * h + 2 * yy + dy) * w + 2 * xx + dx] = src[((4 * ch + k) * oh + yy) * ow + xx];
                }
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    #[test]
    fn two_by_two_ordering() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = psi_forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = RngStream::new(3);
        let x = Tensor::new(&[3, 8, 4], rng.normals(96)).unwrap();
        let y = psi_forward(&x).unwrap();
        assert_eq!(y.shape(), &[12, 4, 2]);
        assert_eq!(psi_inverse(&y).unwrap(), x);
    }

    #[test]
    fn permutes_values() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f64);
        let mut values = psi_forward(&x).unwrap().into_data();
        values.sort_by(f64::total_cmp);
        assert_eq!(values, x.data());
        let c = Tensor::full(&[1, 2, 2], 0.25);
        assert!(psi_forward(&c).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(matches!(psi_forward(&Tensor::zeros(&[1, 3, 2])), Err(NetError::OddSpatial(_))));
        assert!(psi_inverse(&Tensor::zeros(&[3, 1, 1])).is_err());
    }
}
