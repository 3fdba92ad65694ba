use std::hash::Hasher;

use fnv::FnvHasher;

use crate::scalar::Scalar;

/// 64-bit FNV-1a content hash of a head snapshot.
///
/// The hash runs over the little-endian `f32` bytes of the weights (row
/// major) followed by the bias when present, so it matches what a trace
/// emitter computes from the bytes it writes.
pub fn weight_hash<T: Scalar>(weights: &[T], bias: Option<&[T]>) -> u64 {
    let mut hasher = FnvHasher::default();
    for w in weights.iter().chain(bias.unwrap_or(&[])) {
        hasher.write(&w.as_f32().to_le_bytes());
    }
    hasher.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_vector() {
        // FNV-1a 64 of the empty input is the offset basis.
        assert_eq!(weight_hash::<f32>(&[], None), 0xcbf2_9ce4_8422_2325);
        // Bytes of 1.0f32 are 00 00 80 3f.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in [0x00u8, 0x00, 0x80, 0x3f] {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        assert_eq!(weight_hash(&[1.0f32], None), h);
    }

    #[test]
    fn bias_changes_hash() {
        let w = [0.5f64, -0.25];
        assert_ne!(weight_hash(&w, None), weight_hash(&w, Some(&[0.0, 0.0])));
        assert_eq!(weight_hash(&w, None), weight_hash(&[0.5f32, -0.25], None));
    }
}
