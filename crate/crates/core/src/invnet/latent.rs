use super::NetError;
use crate::chemdata::{CELLS, CODE_BITS};
use crate::numeric::RngStream;

/// Leading latent entries that carry the spectrum code.
pub const Y_DIM: usize = CODE_BITS;
/// Remaining free latent entries.
pub const Z_DIM: usize = CELLS - CODE_BITS;

pub fn split_latent(latent: &[f64]) -> Result<(&[f64], &[f64]), NetError> {
    if latent.len() != CELLS {
        return Err(NetError::LatentLength(latent.len()));
    }
    Ok(latent.split_at(Y_DIM))
}

pub fn merge_latent(y: &[f64], z: &[f64]) -> Result<Vec<f64>, NetError> {
    if y.len() != Y_DIM || z.len() != Z_DIM {
        return Err(NetError::LatentParts { y: y.len(), z: z.len() });
    }
    let mut out = Vec::with_capacity(CELLS);
    out.extend_from_slice(y);
    out.extend_from_slice(z);
    Ok(out)
}

/// Standard normal draw for the free part.
pub fn sample_zfree(rng: &mut RngStream) -> Vec<f64> {
    rng.normals(Z_DIM)
}
