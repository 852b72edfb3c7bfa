//! Short-term discovery table: 17 K-buckets with replacement lists, /24
//! subnet limits, and the iterative closest-node lookup.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::ids::{
    bucket_index, log_distance, NodeId, NodeRecord, SubnetKey, BUCKET_COUNT, BUCKET_SIZE,
    TABLE_CAPACITY,
};
use crate::SimTime;

/// Per-bucket cap on entries from one /24 subnet.
pub const BUCKET_IP_LIMIT: u32 = 2;
/// Table-wide cap on entries from one /24 subnet.
pub const TABLE_IP_LIMIT: u32 = 10;
/// Replacement list capacity per bucket.
pub const MAX_REPLACEMENTS: usize = 10;

#[derive(Debug, Clone)]
pub struct BucketEntry {
    pub record: NodeRecord,
    pub added_at: SimTime,
    pub last_seen: SimTime,
    pub liveness_checks_passed: u32,
}

#[derive(Debug, Clone, Default)]
pub struct KBucket {
    /// Most-recently-validated first; revalidation targets the back.
    pub entries: Vec<BucketEntry>,
    /// Newest first, capped at [`MAX_REPLACEMENTS`].
    pub replacements: Vec<NodeRecord>,
}

impl KBucket {
    fn subnet_count(&self, key: SubnetKey) -> u32 {
        self.entries.iter().filter(|e| e.record.subnet() == key).count() as u32
    }

    fn replacement_subnet_count(&self, key: SubnetKey) -> u32 {
        self.replacements.iter().filter(|r| r.subnet() == key).count() as u32
    }

    fn contains(&self, id: NodeId) -> bool {
        self.entries.iter().any(|e| e.record.id == id)
            || self.replacements.iter().any(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AddOutcome {
    Added,
    Bumped,
    ReplacementListed,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    IpLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("a node never tables itself")]
    SelfEntry,
    #[error("malformed endpoint (zero port)")]
    BadEndpoint,
}

#[derive(Debug, Clone)]
pub struct DiscoveryTable {
    self_id: NodeId,
    buckets: Vec<KBucket>,
    subnet_counts: BTreeMap<SubnetKey, u32>,
    len: usize,
}

impl DiscoveryTable {
    pub fn new(self_id: NodeId) -> Self {
        DiscoveryTable {
            self_id,
            buckets: vec![KBucket::default(); BUCKET_COUNT],
            subnet_counts: BTreeMap::new(),
            len: 0,
        }
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bucket(&self, k: usize) -> &KBucket {
        &self.buckets[k - 1]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        match bucket_index(self.self_id, id) {
            Ok(k) => self.buckets[k - 1].entries.iter().any(|e| e.record.id == id),
            Err(_) => false,
        }
    }

    /// Cleared entirely on restart; the node database is untouched.
    pub fn clear(&mut self) {
        for b in &mut self.buckets {
            b.entries.clear();
            b.replacements.clear();
        }
        self.subnet_counts.clear();
        self.len = 0;
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, &BucketEntry)> {
        self.buckets
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.entries.iter().map(move |e| (i + 1, e)))
    }

    fn table_subnet_count(&self, key: SubnetKey) -> u32 {
        self.subnet_counts.get(&key).copied().unwrap_or(0)
    }

    /// Passive/active admission path. An existing entry is bumped to the
    /// bucket front; a fresh record is appended when the bucket has room and
    /// the /24 limits permit; a full bucket offers it to the replacement
    /// list. IP-limit violations are rejected outright.
    pub fn add_seen_node(
        &mut self,
        rec: NodeRecord,
        now: SimTime,
    ) -> Result<AddOutcome, TableError> {
        if rec.id == self.self_id {
            return Err(TableError::SelfEntry);
        }
        if rec.udp_port == 0 {
            return Err(TableError::BadEndpoint);
        }
        let k = bucket_index(self.self_id, rec.id).expect("checked self above");
        let key = rec.subnet();

        let bucket = &mut self.buckets[k - 1];
        if let Some(pos) = bucket.entries.iter().position(|e| e.record.id == rec.id) {
            let mut entry = bucket.entries.remove(pos);
            entry.last_seen = now;
            if rec.seq > entry.record.seq {
                entry.record = rec;
            }
            bucket.entries.insert(0, entry);
            return Ok(AddOutcome::Bumped);
        }
        if let Some(pos) = bucket.replacements.iter().position(|r| r.id == rec.id) {
            let r = bucket.replacements.remove(pos);
            bucket.replacements.insert(0, if rec.seq > r.seq { rec } else { r });
            return Ok(AddOutcome::ReplacementListed);
        }

        if bucket.entries.len() < BUCKET_SIZE {
            if bucket.subnet_count(key) >= BUCKET_IP_LIMIT
                || self.table_subnet_count(key) >= TABLE_IP_LIMIT
            {
                return Ok(AddOutcome::Rejected(RejectReason::IpLimit));
            }
            self.buckets[k - 1].entries.push(BucketEntry {
                record: rec,
                added_at: now,
                last_seen: now,
                liveness_checks_passed: 0,
            });
            *self.subnet_counts.entry(key).or_insert(0) += 1;
            self.len += 1;
            return Ok(AddOutcome::Added);
        }

        // Bucket full: offer to the replacement list under its own /24 rule.
        let bucket = &mut self.buckets[k - 1];
        if bucket.replacement_subnet_count(key) >= BUCKET_IP_LIMIT {
            return Ok(AddOutcome::Rejected(RejectReason::IpLimit));
        }
        bucket.replacements.insert(0, rec);
        bucket.replacements.truncate(MAX_REPLACEMENTS);
        Ok(AddOutcome::ReplacementListed)
    }

    /// Random non-empty bucket's least-recently-validated entry.
    pub fn revalidation_victim<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(usize, NodeRecord)> {
        let non_empty: Vec<usize> =
            (0..BUCKET_COUNT).filter(|&i| !self.buckets[i].entries.is_empty()).collect();
        if non_empty.is_empty() {
            return None;
        }
        let i = non_empty[rng.gen_range(0..non_empty.len())];
        let rec = self.buckets[i].entries.last().unwrap().record;
        Some((i + 1, rec))
    }

    /// A revalidation ping was answered: bump the counter, adopt a newer
    /// record seq if offered, and promote the entry to the bucket front.
    pub fn on_revalidation_pass(&mut self, k: usize, id: NodeId, newer: NodeRecord, now: SimTime) {
        let bucket = &mut self.buckets[k - 1];
        if let Some(pos) = bucket.entries.iter().position(|e| e.record.id == id) {
            let mut entry = bucket.entries.remove(pos);
            entry.liveness_checks_passed += 1;
            entry.last_seen = now;
            if newer.id == id && newer.seq > entry.record.seq {
                entry.record = newer;
            }
            bucket.entries.insert(0, entry);
        }
    }

    /// A revalidation ping timed out: evict the entry and promote the first
    /// replacement that still passes the entry IP limits.
    pub fn on_revalidation_timeout(&mut self, k: usize, id: NodeId, now: SimTime) {
        if self.remove_entry(k, id).is_none() {
            return;
        }
        let mut i = 0;
        loop {
            let Some(candidate) = self.buckets[k - 1].replacements.get(i).copied() else {
                return;
            };
            let key = candidate.subnet();
            let fits = self.buckets[k - 1].subnet_count(key) < BUCKET_IP_LIMIT
                && self.table_subnet_count(key) < TABLE_IP_LIMIT;
            if fits {
                self.buckets[k - 1].replacements.remove(i);
                // fresh liveness is implied; it was talking to us recently
                self.buckets[k - 1].entries.insert(
                    0,
                    BucketEntry {
                        record: candidate,
                        added_at: now,
                        last_seen: now,
                        liveness_checks_passed: 0,
                    },
                );
                *self.subnet_counts.entry(key).or_insert(0) += 1;
                self.len += 1;
                return;
            }
            i += 1;
        }
    }

    fn remove_entry(&mut self, k: usize, id: NodeId) -> Option<BucketEntry> {
        let bucket = &mut self.buckets[k - 1];
        let pos = bucket.entries.iter().position(|e| e.record.id == id)?;
        let entry = bucket.entries.remove(pos);
        let key = entry.record.subnet();
        let cnt = self.subnet_counts.get_mut(&key).expect("subnet accounted");
        *cnt -= 1;
        if *cnt == 0 {
            self.subnet_counts.remove(&key);
        }
        self.len -= 1;
        Some(entry)
    }

    /// Drop a peer entirely (entries and replacements), e.g. when blacklisted.
    pub fn remove(&mut self, id: NodeId) {
        if let Ok(k) = bucket_index(self.self_id, id) {
            self.remove_entry(k, id);
            self.buckets[k - 1].replacements.retain(|r| r.id != id);
        }
    }

    /// The `n` table entries closest to `target` by XOR distance.
    pub fn closest(&self, target: NodeId, n: usize) -> Vec<NodeRecord> {
        let mut all: Vec<NodeRecord> = self.iter_entries().map(|(_, e)| e.record).collect();
        all.sort_by(|a, b| xor_cmp(a.id, b.id, target));
        all.truncate(n);
        all
    }

    /// Attacker-held share of slot capacity in the `last_n` highest buckets.
    pub fn fill_rate(&self, attacker_ids: &BTreeSet<NodeId>, last_n: usize) -> f64 {
        assert!((1..=BUCKET_COUNT).contains(&last_n));
        let held: usize = self
            .buckets
            .iter()
            .skip(BUCKET_COUNT - last_n)
            .map(|b| b.entries.iter().filter(|e| attacker_ids.contains(&e.record.id)).count())
            .sum();
        held as f64 / (BUCKET_SIZE * last_n) as f64
    }

    /// Occupied share of slot capacity in the `last_n` highest buckets.
    pub fn occupancy(&self, last_n: usize) -> f64 {
        let held: usize =
            self.buckets.iter().skip(BUCKET_COUNT - last_n).map(|b| b.entries.len()).sum();
        held as f64 / (BUCKET_SIZE * last_n) as f64
    }

    /// Line-oriented snapshot: bucket index, slot index, hex id, ip, attacker flag.
    pub fn snapshot_lines(&self, attacker_ids: &BTreeSet<NodeId>) -> Vec<String> {
        let mut lines = Vec::with_capacity(self.len);
        for (i, b) in self.buckets.iter().enumerate() {
            for (slot, e) in b.entries.iter().enumerate() {
                lines.push(format!(
                    "{} {} {} {} {}",
                    i + 1,
                    slot,
                    e.record.id,
                    e.record.ip,
                    u8::from(attacker_ids.contains(&e.record.id))
                ));
            }
        }
        lines
    }

    /// Checks every structural invariant; returns a description of the first
    /// violation. Run by tests after each mutation.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        let mut table_subnets: BTreeMap<SubnetKey, u32> = BTreeMap::new();
        let mut total = 0usize;
        for (i, b) in self.buckets.iter().enumerate() {
            let k = i + 1;
            if b.entries.len() > BUCKET_SIZE {
                return Err(format!("bucket {k} holds {} entries", b.entries.len()));
            }
            if b.replacements.len() > MAX_REPLACEMENTS {
                return Err(format!("bucket {k} replacement list overflow"));
            }
            let mut bucket_subnets: BTreeMap<SubnetKey, u32> = BTreeMap::new();
            for e in &b.entries {
                if bucket_index(self.self_id, e.record.id) != Ok(k) {
                    return Err(format!("entry {} in wrong bucket {k}", e.record.id));
                }
                if !seen.insert(e.record.id) {
                    return Err(format!("duplicate id {}", e.record.id));
                }
                *bucket_subnets.entry(e.record.subnet()).or_insert(0) += 1;
                *table_subnets.entry(e.record.subnet()).or_insert(0) += 1;
                total += 1;
            }
            for r in &b.replacements {
                if !seen.insert(r.id) {
                    return Err(format!("id {} duplicated in replacements", r.id));
                }
            }
            if let Some((key, n)) = bucket_subnets.iter().find(|(_, &n)| n > BUCKET_IP_LIMIT) {
                return Err(format!("bucket {k} holds {n} entries from {key}"));
            }
        }
        if let Some((key, n)) = table_subnets.iter().find(|(_, &n)| n > TABLE_IP_LIMIT) {
            return Err(format!("table holds {n} entries from {key}"));
        }
        if total > TABLE_CAPACITY {
            return Err(format!("table holds {total} entries"));
        }
        if total != self.len {
            return Err(format!("length cache {} != {total}", self.len));
        }
        if table_subnets != self.subnet_counts {
            return Err("subnet count cache out of sync".into());
        }
        Ok(())
    }
}

/// Orders `a` vs `b` by XOR distance to `target`.
pub fn xor_cmp(a: NodeId, b: NodeId, target: NodeId) -> std::cmp::Ordering {
    for i in 0..32 {
        let da = a.0[i] ^ target.0[i];
        let db = b.0[i] ^ target.0[i];
        if da != db {
            return da.cmp(&db);
        }
    }
    std::cmp::Ordering::Equal
}

/// Iterative closest-node search. The caller owns message passing: it asks
/// for the next action, sends the FindNode, and feeds responses (or
/// failures) back in. Querying is strictly sequential.
#[derive(Debug, Clone)]
pub struct LookupState {
    target: NodeId,
    result: Vec<NodeRecord>,
    queried: BTreeSet<NodeId>,
    in_flight: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupAction {
    Query(NodeRecord),
    Done,
}

impl LookupState {
    /// Seeds the result set with the 16 closest local entries.
    pub fn new(target: NodeId, table: &DiscoveryTable) -> Self {
        LookupState {
            target,
            result: table.closest(target, BUCKET_SIZE),
            queried: BTreeSet::new(),
            in_flight: None,
        }
    }

    pub fn target(&self) -> NodeId {
        self.target
    }

    /// Current result set, closest first.
    pub fn results(&self) -> &[NodeRecord] {
        &self.result
    }

    pub fn in_flight(&self) -> Option<NodeId> {
        self.in_flight
    }

    pub fn is_finished(&self) -> bool {
        self.in_flight.is_none() && self.result.iter().all(|r| self.queried.contains(&r.id))
    }

    /// Picks the nearest unqueried member and marks it queried.
    pub fn next_action(&mut self) -> LookupAction {
        debug_assert!(self.in_flight.is_none(), "lookup queries one node at a time");
        match self.result.iter().find(|r| !self.queried.contains(&r.id)) {
            Some(rec) => {
                let rec = *rec;
                self.queried.insert(rec.id);
                self.in_flight = Some(rec.id);
                LookupAction::Query(rec)
            }
            None => LookupAction::Done,
        }
    }

    /// Merge a Neighbors payload; returns the records that were new to the
    /// result set merge (already deduplicated), for table storage and buffer
    /// streaming by the caller.
    pub fn on_response(&mut self, from: NodeId, records: &[NodeRecord]) -> Vec<NodeRecord> {
        if self.in_flight == Some(from) {
            self.in_flight = None;
        }
        let mut fresh = Vec::new();
        for rec in records.iter().take(BUCKET_SIZE) {
            if self.result.iter().any(|r| r.id == rec.id) {
                continue;
            }
            fresh.push(*rec);
            let pos = self
                .result
                .partition_point(|r| xor_cmp(r.id, rec.id, self.target).is_lt());
            self.result.insert(pos, *rec);
        }
        self.result.truncate(BUCKET_SIZE);
        fresh
    }

    /// The queried peer never answered; it stays marked queried.
    pub fn on_failure(&mut self, from: NodeId) {
        if self.in_flight == Some(from) {
            self.in_flight = None;
        }
    }
}
