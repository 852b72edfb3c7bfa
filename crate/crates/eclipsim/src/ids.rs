//! Node identity, XOR distance, bucket indexing and subnet keys.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of K-buckets in a discovery table.
pub const BUCKET_COUNT: usize = 17;
/// Entries per bucket.
pub const BUCKET_SIZE: usize = 16;
/// Total table capacity (17 * 16).
pub const TABLE_CAPACITY: usize = BUCKET_COUNT * BUCKET_SIZE;
/// Log-distances below this all collapse into bucket 1.
pub const MIN_BUCKET_DISTANCE: u32 = 240;

/// 256-bit node identity. Ordering is plain lexicographic over the bytes,
/// equality is bitwise. Carries no key material.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(#[serde(with = "hex_bytes")] pub [u8; 32]);

impl NodeId {
    pub const ZERO: NodeId = NodeId([0u8; 32]);
    pub const MAX: NodeId = NodeId([0xff; 32]);

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        NodeId(bytes)
    }

    /// Deterministic id from a small integer, handy in tests.
    pub fn from_u64(v: u64) -> Self {
        let mut b = [0u8; 32];
        b[24..].copy_from_slice(&v.to_be_bytes());
        NodeId(b)
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < 256);
        self.0[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, v: bool) {
        let mask = 1u8 << (7 - i % 8);
        if v {
            self.0[i / 8] |= mask;
        } else {
            self.0[i / 8] &= !mask;
        }
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for NodeId {
    // full ids overwhelm debug output; show the first four bytes
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "NodeId({:02x}{:02x}{:02x}{:02x}..)",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

impl FromStr for NodeId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(IdError::BadHex);
        }
        let mut b = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = hex_val(chunk[0]).ok_or(IdError::BadHex)?;
            let lo = hex_val(chunk[1]).ok_or(IdError::BadHex)?;
            b[i] = hi << 4 | lo;
        }
        Ok(NodeId(b))
    }
}

fn hex_val(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], ser: S) -> Result<S::Ok, S::Error> {
        let mut s = String::with_capacity(64);
        for b in bytes {
            s.push_str(&format!("{b:02x}"));
        }
        ser.serialize_str(&s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(de)?;
        let id: super::NodeId = s.parse().map_err(serde::de::Error::custom)?;
        Ok(id.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdError {
    #[error("node id is not 64 hex characters")]
    BadHex,
    #[error("a node never buckets itself")]
    SelfEntry,
    #[error("bucket index out of range 1..=17")]
    BadBucket,
}

/// A node's advertised endpoint record. `seq` only increases across updates
/// to the same id; `(ip, udp_port)` identifies a live endpoint in one world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub ip: Ipv4Addr,
    pub udp_port: u16,
    pub tcp_port: u16,
    pub seq: u64,
}

impl NodeRecord {
    pub fn new(id: NodeId, ip: Ipv4Addr, port: u16) -> Self {
        NodeRecord { id, ip, udp_port: port, tcp_port: port, seq: 1 }
    }

    pub fn subnet(&self) -> SubnetKey {
        subnet_key(self.ip)
    }
}

/// First 24 bits of an IPv4 address. Two addresses share a key iff their
/// first three octets are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubnetKey(pub [u8; 3]);

impl fmt::Display for SubnetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.0[0], self.0[1], self.0[2])
    }
}

pub fn subnet_key(ip: Ipv4Addr) -> SubnetKey {
    let o = ip.octets();
    SubnetKey([o[0], o[1], o[2]])
}

/// 256 minus the number of common leading bits of `a` and `b`; 0 iff equal.
pub fn log_distance(a: NodeId, b: NodeId) -> u32 {
    for i in 0..32 {
        let x = a.0[i] ^ b.0[i];
        if x != 0 {
            return 256 - (i as u32 * 8 + x.leading_zeros());
        }
    }
    0
}

/// Bucket for `other` in `this`'s table: distances 240..=256 map onto
/// buckets 1..=17, everything nearer collapses into bucket 1. Bucket 17
/// therefore covers half the id space, bucket 16 a quarter, and so on.
pub fn bucket_index(this: NodeId, other: NodeId) -> Result<usize, IdError> {
    let d = log_distance(this, other);
    if d == 0 {
        return Err(IdError::SelfEntry);
    }
    if d >= MIN_BUCKET_DISTANCE {
        Ok((d - MIN_BUCKET_DISTANCE + 1) as usize)
    } else {
        Ok(1)
    }
}

/// Probability that a uniformly random id lands in bucket `k`:
/// 2^(k-18) for k >= 2, and the residual 2^-16 for bucket 1.
///
/// # Panics
/// Panics when `k` is outside 1..=17.
pub fn bucket_probability(k: usize) -> f64 {
    assert!((1..=BUCKET_COUNT).contains(&k), "bucket index out of range 1..=17");
    if k == 1 {
        2f64.powi(-16)
    } else {
        2f64.powi(k as i32 - 18)
    }
}

/// Sum of bucket probabilities over the `last_n` highest-index buckets.
pub fn last_n_selection_rate(last_n: usize) -> f64 {
    assert!((1..=BUCKET_COUNT).contains(&last_n));
    (BUCKET_COUNT - last_n + 1..=BUCKET_COUNT).map(bucket_probability).sum()
}

/// Uniformly random id whose first `leading_zero_bits` bits are zero.
pub fn generate_node_id<R: Rng + ?Sized>(rng: &mut R, leading_zero_bits: u32) -> NodeId {
    assert!(leading_zero_bits <= 256);
    let mut b = [0u8; 32];
    rng.fill(&mut b);
    let full = (leading_zero_bits / 8) as usize;
    for byte in b.iter_mut().take(full) {
        *byte = 0;
    }
    let rem = leading_zero_bits % 8;
    if rem > 0 && full < 32 {
        b[full] &= 0xff >> rem;
    }
    NodeId(b)
}

/// Random id at exactly the distance band of bucket `k` from `anchor`:
/// shares exactly `17 - k` leading bits for k >= 2; for bucket 1 it shares
/// exactly 16 bits (distance 240), the top of the collapsed range.
pub fn generate_id_in_bucket<R: Rng + ?Sized>(
    rng: &mut R,
    anchor: NodeId,
    k: usize,
) -> Result<NodeId, IdError> {
    if !(1..=BUCKET_COUNT).contains(&k) {
        return Err(IdError::BadBucket);
    }
    let shared = BUCKET_COUNT - k; // 0..=16
    let mut id = generate_node_id(rng, 0);
    for i in 0..shared {
        let v = anchor.bit(i);
        id.set_bit(i, v);
    }
    id.set_bit(shared, !anchor.bit(shared));
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent oracle: count common leading bits one bit at a time.
    fn log_distance_oracle(a: NodeId, b: NodeId) -> u32 {
        for i in 0..256 {
            if a.bit(i) != b.bit(i) {
                return 256 - i as u32;
            }
        }
        0
    }

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn distance_identity_and_first_bit() {
        let a = NodeId::ZERO;
        assert_eq!(log_distance(a, a), 0);
        let mut b = NodeId::ZERO;
        b.0[0] = 0x80;
        assert_eq!(log_distance(a, b), 256);
    }

    #[test]
    fn distance_matches_bit_scan_oracle() {
        let mut r = rng(7);
        for _ in 0..64 {
            let a = generate_node_id(&mut r, 0);
            let b = if r.gen_bool(0.3) {
                // force long shared prefixes into the sample
                let mut c = a;
                let flip = r.gen_range(200..256);
                c.set_bit(flip, !a.bit(flip));
                c
            } else {
                generate_node_id(&mut r, 0)
            };
            assert_eq!(log_distance(a, b), log_distance_oracle(a, b));
        }
    }

    #[test]
    fn distance_symmetric_and_ultrametric() {
        let mut r = rng(8);
        for _ in 0..200 {
            let a = generate_node_id(&mut r, 0);
            let b = generate_node_id(&mut r, 0);
            let c = generate_node_id(&mut r, 0);
            assert_eq!(log_distance(a, b), log_distance(b, a));
            assert!(log_distance(a, b) <= log_distance(a, c).max(log_distance(c, b)));
        }
    }

    #[test]
    fn bucket_index_edges() {
        let a = NodeId::ZERO;
        let mut first_bit = NodeId::ZERO;
        first_bit.0[0] = 0x80;
        assert_eq!(bucket_index(a, first_bit).unwrap(), 17);

        // shares exactly 16 leading bits: distance 240 -> bucket 1
        let mut d240 = NodeId::ZERO;
        d240.set_bit(16, true);
        assert_eq!(log_distance(a, d240), 240);
        assert_eq!(bucket_index(a, d240).unwrap(), 1);

        // nearer than the band floor still lands in bucket 1
        let mut near = NodeId::ZERO;
        near.set_bit(255, true);
        assert_eq!(bucket_index(a, near).unwrap(), 1);

        assert_eq!(bucket_index(a, a), Err(IdError::SelfEntry));
    }

    #[test]
    fn bucket_probability_sums() {
        let last2 = last_n_selection_rate(2);
        assert!((last2 - 0.75).abs() < 1e-12);
        let last5: f64 = last_n_selection_rate(5);
        assert!((last5 - 31.0 / 32.0).abs() < 1e-12);
        let total: f64 = (1..=17).map(bucket_probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn bucket_probability_rejects_out_of_range() {
        bucket_probability(18);
    }

    #[test]
    fn bucket_frequencies_match_closed_form() {
        // Monte Carlo against the closed form; uniform others vs a fixed self.
        let mut r = rng(42);
        let this = generate_node_id(&mut r, 0);
        const N: usize = 1_000_000;
        let mut counts = [0u64; BUCKET_COUNT + 1];
        for _ in 0..N {
            let other = generate_node_id(&mut r, 0);
            if other == this {
                continue;
            }
            counts[bucket_index(this, other).unwrap()] += 1;
        }
        for k in 12..=BUCKET_COUNT {
            let p = bucket_probability(k);
            let se = (p * (1.0 - p) / N as f64).sqrt();
            let observed = counts[k] as f64 / N as f64;
            assert!(
                (observed - p).abs() <= 3.0 * se,
                "bucket {k}: observed {observed}, expected {p} (3se {:.2e})",
                3.0 * se
            );
        }
    }

    #[test]
    fn generated_ids_respect_leading_zeros() {
        let mut r = rng(3);
        assert_eq!(generate_node_id(&mut r, 256), NodeId::ZERO);
        let id = generate_node_id(&mut r, 8);
        assert_eq!(id.0[0], 0);
        // reproducible under the same seed
        let a = generate_node_id(&mut rng(11), 0);
        let b = generate_node_id(&mut rng(11), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn leading_zero_ids_sort_first() {
        let mut r = rng(5);
        let low = generate_node_id(&mut r, 16);
        for _ in 0..100 {
            let other = generate_node_id(&mut r, 0);
            if other.0[0] != 0 || other.0[1] != 0 {
                assert!(low < other);
            }
        }
    }

    #[test]
    fn crafted_ids_land_in_requested_bucket() {
        let mut r = rng(6);
        let anchor = generate_node_id(&mut r, 0);
        for k in 1..=BUCKET_COUNT {
            for _ in 0..8 {
                let id = generate_id_in_bucket(&mut r, anchor, k).unwrap();
                assert_eq!(bucket_index(anchor, id).unwrap(), k, "bucket {k}");
            }
        }
        assert_eq!(generate_id_in_bucket(&mut r, anchor, 0), Err(IdError::BadBucket));
    }

    #[test]
    fn hex_round_trip() {
        let mut r = rng(9);
        let id = generate_node_id(&mut r, 0);
        let s = id.to_string();
        assert_eq!(s.len(), 64);
        assert!(s.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(s.parse::<NodeId>().unwrap(), id);
    }

    #[test]
    fn subnet_keys() {
        assert_eq!(
            subnet_key("10.1.2.3".parse().unwrap()),
            subnet_key("10.1.2.250".parse().unwrap())
        );
        assert_ne!(
            subnet_key("10.1.2.3".parse().unwrap()),
            subnet_key("10.1.3.3".parse().unwrap())
        );
        assert_eq!(subnet_key("0.0.0.0".parse().unwrap()), SubnetKey([0, 0, 0]));
    }
}
