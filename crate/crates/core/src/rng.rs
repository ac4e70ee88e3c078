//! Seed derivation. A single root seed fans out into independent streams,
//! one per purpose tag (`init`, `dropout`, `data`, `shuffle`, ...).

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a purpose tag and any number of integer indices.
pub fn derive_seed(root: u64, tag: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut s = splitmix64(root ^ splitmix64(h));
    for &i in indices {
        s = splitmix64(s ^ splitmix64(i.wrapping_add(0x2545_F491_4F6C_DD1D)));
    }
    s
}

pub fn rng_for(root: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tag, indices))
}
