//! Gradient packing: small gradients are fused into fixed-size chunks so one
//! collective call carries many of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default fusion threshold: gradients of at least this many bytes travel alone.
pub const DEFAULT_FUSION_THRESHOLD: u64 = 1 << 20;
/// Default chunk size of a fused bucket.
pub const DEFAULT_CHUNK_SIZE: u64 = 4 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gradient {
    pub name: String,
    pub bytes: u64,
}

impl Gradient {
    pub fn new(name: impl Into<String>, bytes: u64) -> Self {
        Gradient {
            name: name.into(),
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionBucket {
    pub members: Vec<Gradient>,
    pub total_bytes: u64,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packing {
    pub buckets: Vec<FusionBucket>,
    pub unfused: Vec<Gradient>,
}

impl Packing {
    /// Collective calls needed to synchronize every gradient.
    pub fn calls(&self) -> usize {
        self.buckets.len() + self.unfused.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.buckets.iter().map(|b| b.total_bytes).sum::<u64>()
            + self.unfused.iter().map(|g| g.bytes).sum::<u64>()
    }
}

/// Greedy first-fit in the given order: gradients of at least `threshold`
/// bytes pass through unfused; smaller ones fill the open bucket until the
/// next one would overflow `chunk_size`.
pub fn pack_gradients(gradients: &[Gradient], threshold: u64, chunk_size: u64) -> Result<Packing> {
    if threshold > chunk_size {
        return Err(Error::BadConfig(format!(
            "fusion threshold {threshold} exceeds chunk size {chunk_size}"
        )));
    }
    let mut out = Packing::default();
    let mut open: Option<FusionBucket> = None;
    for g in gradients {
        if g.bytes >= threshold {
            out.unfused.push(g.clone());
            continue;
        }
        if let Some(b) = &open {
            if b.total_bytes + g.bytes > chunk_size {
                out.buckets.push(open.take().unwrap());
            }
        }
        let b = open.get_or_insert_with(|| FusionBucket {
            members: Vec::new(),
            total_bytes: 0,
            chunk_index: out.buckets.len(),
        });
        b.total_bytes += g.bytes;
        b.members.push(g.clone());
    }
    out.buckets.extend(open);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(sizes: &[u64]) -> Vec<Gradient> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &b)| Gradient::new(format!("g{i}"), b))
            .collect()
    }

    #[test]
    fn small_gradients_share_a_bucket() {
        let p = pack_gradients(&grads(&[100, 200, 5 * 1024]), 1024, 4096).unwrap();
        assert_eq!(p.buckets.len(), 1);
        assert_eq!(p.buckets[0].total_bytes, 300);
        assert_eq!(p.unfused.len(), 1);
        assert_eq!(p.unfused[0].bytes, 5 * 1024);
    }

    #[test]
    fn empty_input_has_no_buckets() {
        let p = pack_gradients(&[], 1024, 4096).unwrap();
        assert_eq!(p.calls(), 0);
    }

    #[test]
    fn threshold_above_chunk_is_rejected() {
        assert!(matches!(
            pack_gradients(&[], 8192, 4096),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn order_is_preserved() {
        let g = grads(&[10, 2000, 20, 30]);
        let p = pack_gradients(&g, 40, 40).unwrap();
        let names: Vec<Vec<&str>> = p
            .buckets
            .iter()
            .map(|b| b.members.iter().map(|m| m.name.as_str()).collect())
            .collect();
        assert_eq!(names, [vec!["g0", "g2"], vec!["g3"]]);
        assert_eq!(p.buckets[1].chunk_index, 1);
    }
}
