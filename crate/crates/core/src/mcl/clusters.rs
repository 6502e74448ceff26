use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-sample history of `(image_label, text_label)` pairs, one per
/// completed clustering round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub sample_id: usize,
    pub labels: Vec<(usize, usize)>,
}

impl ClusterAssignment {
    /// The accumulated cluster after `stage` rounds: the first `stage` pairs.
    pub fn key(&self, stage: usize) -> &[(usize, usize)] {
        &self.labels[..stage.min(self.labels.len())]
    }
}

pub fn accumulate_clusters(
    prev: &[ClusterAssignment],
    sample_ids: &[usize],
    img_labels: &[usize],
    txt_labels: &[usize],
) -> Result<Vec<ClusterAssignment>> {
    if img_labels.len() != sample_ids.len() || txt_labels.len() != sample_ids.len() {
        return Err(Error::Alignment(format!(
            "{} ids, {} image labels, {} text labels",
            sample_ids.len(),
            img_labels.len(),
            txt_labels.len()
        )));
    }
    if prev.is_empty() {
        return Ok(sample_ids
            .iter()
            .zip(img_labels.iter().zip(txt_labels))
            .map(|(&sample_id, (&i, &t))| ClusterAssignment {
                sample_id,
                labels: vec![(i, t)],
            })
            .collect());
    }
    if prev.len() != sample_ids.len() {
        return Err(Error::Alignment(format!(
            "{} previous assignments for {} samples",
            prev.len(),
            sample_ids.len()
        )));
    }
    prev.iter()
        .zip(sample_ids)
        .zip(img_labels.iter().zip(txt_labels))
        .map(|((a, &id), (&i, &t))| {
            if a.sample_id != id {
                return Err(Error::Alignment(format!(
                    "assignment for sample {} where {id} was expected",
                    a.sample_id
                )));
            }
            let mut labels = a.labels.clone();
            labels.push((i, t));
            Ok(ClusterAssignment {
                sample_id: id,
                labels,
            })
        })
        .collect()
}

/// Dense integer ids for the full accumulated keys, numbered by first
/// appearance. An empty history maps every sample to key 0.
pub fn key_ids(assignments: &[ClusterAssignment]) -> Vec<usize> {
    let mut ids: HashMap<&[(usize, usize)], usize> = HashMap::new();
    assignments
        .iter()
        .map(|a| {
            let next = ids.len();
            *ids.entry(a.labels.as_slice()).or_insert(next)
        })
        .collect()
}

pub fn distinct_keys(assignments: &[ClusterAssignment]) -> usize {
    key_ids(assignments).into_iter().max().map_or(0, |m| m + 1)
}

/// `sample_id,stage,image_label,text_label`, one row per sample and round.
pub fn write_csv(assignments: &[ClusterAssignment], path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "sample_id,stage,image_label,text_label").map_err(io)?;
    for a in assignments {
        for (stage, (i, t)) in a.labels.iter().enumerate() {
            writeln!(w, "{},{stage},{i},{t}", a.sample_id).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_csv(path: &Path) -> Result<Vec<ClusterAssignment>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out: Vec<ClusterAssignment> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let f = |i: usize| -> Result<usize> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::Data(format!("assignments column {i}: {e}")))
        };
        let (id, stage, il, tl) = (f(0)?, f(1)?, f(2)?, f(3)?);
        let slot = *index.entry(id).or_insert_with(|| {
            out.push(ClusterAssignment {
                sample_id: id,
                labels: Vec::new(),
            });
            out.len() - 1
        });
        if out[slot].labels.len() != stage {
            return Err(Error::Data(format!("sample {id}: stage {stage} out of order")));
        }
        out[slot].labels.push((il, tl));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn first_round_has_length_one() {
        let a = accumulate_clusters(&[], &[4, 5, 6], &[0, 1, 2], &[2, 1, 0]).unwrap();
        assert!(a.iter().all(|c| c.labels.len() == 1));
        assert_eq!(a[1].labels, vec![(1, 1)]);
    }

    #[test]
    fn equal_prefixes_share_a_key() {
        let a = accumulate_clusters(&[], &[0, 1, 2], &[0, 0, 1], &[1, 1, 1]).unwrap();
        let b = accumulate_clusters(&a, &[0, 1, 2], &[2, 2, 2], &[0, 0, 0]).unwrap();
        let k = key_ids(&b);
        assert_eq!(k[0], k[1]);
        assert_ne!(k[0], k[2]);
        assert_eq!(b[0].key(1), &[(0, 1)]);
    }

    #[test]
    fn misaligned_inputs() {
        assert!(matches!(
            accumulate_clusters(&[], &[0, 1], &[0], &[0, 1]),
            Err(Error::Alignment(_))
        ));
        let a = accumulate_clusters(&[], &[0, 1], &[0, 0], &[0, 0]).unwrap();
        assert!(matches!(
            accumulate_clusters(&a, &[1, 0], &[0, 0], &[0, 0]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn key_count_bound() {
        // 900 samples, 3×3 labels per round, 2 rounds → at most 81 keys.
        let mut r = crate::rng::seeded(1, 0);
        let ids: Vec<usize> = (0..900).collect();
        let mut a = Vec::new();
        for _ in 0..2 {
            let il: Vec<usize> = (0..900).map(|_| r.random_range(0..3)).collect();
            let tl: Vec<usize> = (0..900).map(|_| r.random_range(0..3)).collect();
            a = accumulate_clusters(&a, &ids, &il, &tl).unwrap();
        }
        let n = distinct_keys(&a);
        assert!(n <= 81);
        assert!(n >= 78, "{n}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = accumulate_clusters(&[], &[3, 9], &[0, 2], &[1, 1]).unwrap();
        let a = accumulate_clusters(&a, &[3, 9], &[1, 1], &[0, 2]).unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&a, &p).unwrap();
        assert_eq!(read_csv(&p).unwrap(), a);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("sample_id,stage,image_label,text_label\n3,0,0,1\n"));
    }
}
