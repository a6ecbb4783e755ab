//! Reference functions of the unmasked input, written without reference to
//! the kernels' register allocation.

pub type Oracle = fn(&[u8]) -> Vec<u8>;

pub const NAMES: [&str; 6] = ["shiftrows", "second-word", "identity", "xor-first-last", "chi", "arx"];

pub fn lookup(name: &str) -> Option<Oracle> {
    Some(match name {
        "shiftrows" => shiftrows,
        "second-word" => second_word,
        "identity" => identity,
        "xor-first-last" => xor_first_last,
        "chi" => chi,
        "arx" => arx,
        _ => return None,
    })
}

fn le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Row `r` of the 4x4 byte state moves left by `r` positions.
fn shiftrows(x: &[u8]) -> Vec<u8> {
    (0..16).map(|i| x[4 * (i / 4) + (i % 4 + i / 4) % 4]).collect()
}

fn second_word(x: &[u8]) -> Vec<u8> {
    x[4..8].to_vec()
}

fn identity(x: &[u8]) -> Vec<u8> {
    x.to_vec()
}

fn xor_first_last(x: &[u8]) -> Vec<u8> {
    (0..4).map(|i| x[i] ^ x[8 + i]).collect()
}

/// `a ^ (!b & c)` on three little-endian words.
fn chi(x: &[u8]) -> Vec<u8> {
    let (a, b, c) = (le(&x[0..4]), le(&x[4..8]), le(&x[8..12]));
    (a ^ (!b & c)).to_le_bytes().to_vec()
}

/// `a + b` and `(d >>> 16) ^ e`.
fn arx(x: &[u8]) -> Vec<u8> {
    let (a, b, d, e) = (le(&x[0..4]), le(&x[4..8]), le(&x[8..12]), le(&x[12..16]));
    let mut out = a.wrapping_add(b).to_le_bytes().to_vec();
    out.extend((d.rotate_right(16) ^ e).to_le_bytes());
    out
}
