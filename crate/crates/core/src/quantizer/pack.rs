//! LSB-first bit packing for 1/2/3/4-bit codes.
//!
//! Codes form one continuous little-endian bit stream: value `i` occupies
//! bits `i*b .. (i+1)*b`, low bits first. For 3-bit codes this is exactly
//! eight values per three bytes.

use crate::error::{arg_err, Error, Result};

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=4).contains(&bits) {
        return arg_err(format!("cannot pack {bits}-bit codes"));
    }
    Ok(())
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack_bits(values: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u16 << bits;
    let mut out = vec![0u8; packed_len(values.len(), bits)];
    for (i, &v) in values.iter().enumerate() {
        if v as u16 >= limit {
            return arg_err(format!("code {v} at index {i} does not fit in {bits} bits"));
        }
        let bit = i * bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = (v as u16) << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(out)
}

pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if bytes.len() < packed_len(count, bits) {
        return Err(Error::Format(format!(
            "{} bytes cannot hold {count} {bits}-bit codes",
            bytes.len()
        )));
    }
    let mask = (1u16 << bits) - 1;
    Ok((0..count)
        .map(|i| {
            let bit = i * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let lo = bytes[byte] as u16;
            let hi = if shift + bits as usize > 8 { (bytes[byte + 1] as u16) << 8 } else { 0 };
            (((lo | hi) >> shift) & mask) as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_examples() {
        assert_eq!(pack_bits(&[3, 0, 2, 1], 2).unwrap(), vec![0x63]);
        assert_eq!(pack_bits(&[1, 0, 0, 0, 0, 0, 0, 1], 1).unwrap(), vec![0x81]);
        // 3-bit: 8 codes per 3 bytes
        assert_eq!(pack_bits(&[7; 8], 3).unwrap(), vec![0xFF; 3]);
        assert_eq!(pack_bits(&[1, 2], 4).unwrap(), vec![0x21]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(pack_bits(&[4], 2), Err(Error::Argument(_))));
        assert!(pack_bits(&[0], 5).is_err());
        assert!(unpack_bits(&[0], 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(bits in 1u8..=4, raw in proptest::collection::vec(any::<u8>(), 0..200)) {
            let vals: Vec<u8> = raw.iter().map(|v| v & ((1 << bits) - 1)).collect();
            let packed = pack_bits(&vals, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(vals.len(), bits));
            prop_assert_eq!(unpack_bits(&packed, bits, vals.len()).unwrap(), vals);
        }
    }
}
