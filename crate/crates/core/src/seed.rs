//! Named random substreams derived from one root seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of substream `label` of `root`.
pub fn substream(root: u64, label: &str) -> u64 {
    mix(root ^ mix(label_hash(label)))
}

/// Seed of the `index`-th draw of a substream.
pub fn indexed(stream: u64, index: u64) -> u64 {
    mix(stream ^ mix(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}
