//! One LRU-managed Sparse Memory Pool.
//!
//! Residency is an intrusive doubly linked list threaded through dense arrays
//! indexed by entry id, so touch, insert and evict are O(1).

use serde::Serialize;

use super::CacheError;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

/// Outcome of serving one step's requested set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessResult {
    pub hit_ids: Vec<u32>,
    pub miss_ids: Vec<u32>,
    /// Previously resident, unrequested entries pushed out by this step.
    pub evicted_ids: Vec<u32>,
    /// Requested entries that could not stay resident because the request
    /// exceeded capacity. Subset of `hit_ids` and `miss_ids`.
    pub transient_ids: Vec<u32>,
    pub h2d_blocks: u64,
    pub d2h_blocks: u64,
}

#[derive(Debug, Clone)]
pub struct SparsePool {
    capacity: usize,
    prev: Vec<u32>,
    next: Vec<u32>,
    resident: Vec<bool>,
    seen: Vec<bool>,
    /// Least recently used end.
    head: u32,
    /// Most recently used end.
    tail: u32,
    len: usize,
    stats: PoolStats,
}

impl SparsePool {
    pub fn new(capacity: usize) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            prev: Vec::new(),
            next: Vec::new(),
            resident: Vec::new(),
            seen: Vec::new(),
            head: NIL,
            tail: NIL,
            len: 0,
            stats: PoolStats::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn contains(&self, id: u32) -> bool {
        self.resident.get(id as usize).copied().unwrap_or(false)
    }

    /// Resident ids from least to most recently used.
    pub fn iter_lru(&self) -> impl Iterator<Item = u32> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            if cur == NIL {
                return None;
            }
            let id = cur;
            cur = self.next[id as usize];
            Some(id)
        })
    }

    /// Sorted resident ids.
    pub fn resident_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.iter_lru().collect();
        v.sort_unstable();
        v
    }

    /// Shrinks or grows capacity, evicting from the LRU end as needed.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<Vec<u32>, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        self.capacity = capacity;
        let mut out = Vec::new();
        self.evict_over(&mut out);
        Ok(out)
    }

    /// Inserts prefill selections window by window, oldest first. Returns how
    /// many ids were newly inserted; refreshes do not count, and no misses are
    /// recorded.
    pub fn warmup<'a>(&mut self, windows: impl IntoIterator<Item = &'a [u32]>) -> usize {
        let mut inserted = 0;
        let mut sink = Vec::new();
        for w in windows {
            for &id in w {
                if !self.contains(id) {
                    inserted += 1;
                }
                self.touch(id);
                self.evict_over(&mut sink);
            }
        }
        self.stats.evictions += sink.len() as u64;
        self.debug_check();
        inserted
    }

    /// Serves one step's strictly increasing requested set.
    ///
    /// Hits are judged against the state before the step. Every requested id
    /// is then moved to the most-recent end in ascending id order and the
    /// pool is trimmed from the least-recent end. When the request exceeds
    /// capacity, the highest ids stay resident and the rest pass through.
    pub fn access_step(&mut self, requested: &[u32]) -> Result<AccessResult, CacheError> {
        if let Some(pos) = requested.windows(2).position(|w| w[0] >= w[1]) {
            return Err(CacheError::NotSorted { position: pos + 1 });
        }
        let mut res = AccessResult::default();
        for &id in requested {
            if self.contains(id) {
                res.hit_ids.push(id);
            } else {
                res.miss_ids.push(id);
            }
        }
        for &id in requested {
            self.touch(id);
        }
        let mut dropped = Vec::new();
        self.evict_over(&mut dropped);

        let overflow = requested.len().saturating_sub(self.capacity);
        res.transient_ids = requested[..overflow].to_vec();
        let was_hit = |id: &u32| res.hit_ids.binary_search(id).is_ok();
        let dropped_hits = res.transient_ids.iter().filter(|id| was_hit(id)).count();
        res.evicted_ids = dropped
            .into_iter()
            .filter(|id| requested.binary_search(id).is_err())
            .collect();
        res.evicted_ids.sort_unstable();

        res.h2d_blocks = res.miss_ids.len() as u64;
        self.stats.hits += res.hit_ids.len() as u64;
        self.stats.misses += res.miss_ids.len() as u64;
        self.stats.evictions += (res.evicted_ids.len() + dropped_hits) as u64;
        self.debug_check();
        Ok(res)
    }

    /// Admits freshly generated entries at the most-recent end. Every id must
    /// be new to this pool. Returns the number of entries written back to
    /// host, which is all of them.
    pub fn append_generated(&mut self, new_ids: &[u32]) -> Result<u64, CacheError> {
        for (i, &id) in new_ids.iter().enumerate() {
            if self.seen.get(id as usize).copied().unwrap_or(false) || new_ids[..i].contains(&id) {
                return Err(CacheError::DuplicateId(id));
            }
        }
        let mut sink = Vec::new();
        for &id in new_ids {
            self.touch(id);
            self.evict_over(&mut sink);
        }
        self.stats.evictions += sink.len() as u64;
        self.debug_check();
        Ok(new_ids.len() as u64)
    }

    fn ensure(&mut self, id: u32) {
        let need = id as usize + 1;
        if self.resident.len() < need {
            let grow = need.max(self.resident.len() * 2);
            self.prev.resize(grow, NIL);
            self.next.resize(grow, NIL);
            self.resident.resize(grow, false);
            self.seen.resize(grow, false);
        }
    }

    fn unlink(&mut self, id: u32) {
        let (p, n) = (self.prev[id as usize], self.next[id as usize]);
        if p == NIL {
            self.head = n;
        } else {
            self.next[p as usize] = n;
        }
        if n == NIL {
            self.tail = p;
        } else {
            self.prev[n as usize] = p;
        }
    }

    fn push_mru(&mut self, id: u32) {
        self.prev[id as usize] = self.tail;
        self.next[id as usize] = NIL;
        if self.tail == NIL {
            self.head = id;
        } else {
            self.next[self.tail as usize] = id;
        }
        self.tail = id;
    }

    /// Moves `id` to the most-recent end, inserting it if absent.
    fn touch(&mut self, id: u32) {
        self.ensure(id);
        if self.resident[id as usize] {
            self.unlink(id);
        } else {
            self.resident[id as usize] = true;
            self.seen[id as usize] = true;
            self.len += 1;
        }
        self.push_mru(id);
    }

    fn evict_over(&mut self, out: &mut Vec<u32>) {
        while self.len > self.capacity {
            let id = self.head;
            self.unlink(id);
            self.resident[id as usize] = false;
            self.len -= 1;
            out.push(id);
        }
    }

    fn debug_check(&self) {
        debug_assert!(self.len <= self.capacity, "pool over capacity");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lru(p: &SparsePool) -> Vec<u32> {
        p.iter_lru().collect()
    }

    #[test]
    fn new_pool_is_empty() {
        let p = SparsePool::new(5).unwrap();
        assert_eq!(p.len(), 0);
        assert_eq!(p.stats(), PoolStats::default());
        assert_eq!(SparsePool::new(0).unwrap_err(), CacheError::ZeroCapacity);
    }

    #[test]
    fn warmup_keeps_newest_windows() {
        let mut p = SparsePool::new(4).unwrap();
        let w: [&[u32]; 3] = [&[1, 2], &[3, 4], &[5, 6]];
        assert_eq!(p.warmup(w), 6);
        assert_eq!(lru(&p), vec![3, 4, 5, 6]);
        assert_eq!(p.stats().misses, 0);
    }

    #[test]
    fn warmup_refresh_is_idempotent() {
        let mut p = SparsePool::new(4).unwrap();
        let w: [&[u32]; 3] = [&[1, 2], &[1, 2], &[1, 2]];
        assert_eq!(p.warmup(w), 2);
        assert_eq!(p.resident_ids(), vec![1, 2]);
        assert_eq!(p.warmup(std::iter::empty()), 0);
        assert_eq!(p.resident_ids(), vec![1, 2]);
    }

    #[test]
    fn access_hits_misses_and_evicts() {
        let mut p = SparsePool::new(4).unwrap();
        p.warmup([&[1u32, 2, 3, 4][..]]);
        let r = p.access_step(&[3, 4, 5]).unwrap();
        assert_eq!(r.hit_ids, vec![3, 4]);
        assert_eq!(r.miss_ids, vec![5]);
        assert_eq!(r.evicted_ids, vec![1]);
        assert_eq!(r.h2d_blocks, 1);
        assert_eq!(lru(&p), vec![2, 3, 4, 5]);

        let r = p.access_step(&[2, 5]).unwrap();
        assert!(r.miss_ids.is_empty() && r.evicted_ids.is_empty());
    }

    #[test]
    fn cold_access_fills_without_eviction() {
        let mut p = SparsePool::new(8).unwrap();
        let r = p.access_step(&[0, 4, 9]).unwrap();
        assert_eq!(r.miss_ids.len(), 3);
        assert!(r.evicted_ids.is_empty());
    }

    #[test]
    fn oversized_request_keeps_highest_ids() {
        let mut p = SparsePool::new(2).unwrap();
        p.warmup([&[1u32, 7][..]]);
        let r = p.access_step(&[1, 2, 3, 4]).unwrap();
        assert_eq!(r.hit_ids, vec![1]);
        assert_eq!(r.miss_ids, vec![2, 3, 4]);
        assert_eq!(r.evicted_ids, vec![7]);
        assert_eq!(r.transient_ids, vec![1, 2]);
        assert_eq!(p.resident_ids(), vec![3, 4]);
        assert_eq!(p.stats().evictions, 2);
    }

    #[test]
    fn unsorted_request_is_rejected() {
        let mut p = SparsePool::new(2).unwrap();
        assert_eq!(
            p.access_step(&[3, 1]).unwrap_err(),
            CacheError::NotSorted { position: 1 }
        );
    }

    #[test]
    fn append_writes_back_and_evicts() {
        let mut p = SparsePool::new(3).unwrap();
        p.warmup([&[0u32, 1, 2][..]]);
        assert_eq!(p.append_generated(&[10, 11]).unwrap(), 2);
        assert_eq!(lru(&p), vec![2, 10, 11]);
        assert_eq!(p.stats().evictions, 2);
        assert_eq!(p.append_generated(&[]).unwrap(), 0);
        assert_eq!(
            p.append_generated(&[11]).unwrap_err(),
            CacheError::DuplicateId(11)
        );
        assert_eq!(
            p.append_generated(&[1]).unwrap_err(),
            CacheError::DuplicateId(1)
        );
    }

    #[test]
    fn shrinking_capacity_evicts_lru() {
        let mut p = SparsePool::new(4).unwrap();
        p.warmup([&[1u32, 2, 3, 4][..]]);
        assert_eq!(p.set_capacity(2).unwrap(), vec![1, 2]);
        assert_eq!(lru(&p), vec![3, 4]);
    }
}
