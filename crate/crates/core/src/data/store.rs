//! Processed-dataset file: `T2DF`, a version byte, split counters, then
//! three length-prefixed record streams (train, validation, test).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{BehaviorSequence, DatasetSplit};
use crate::error::{Error, Result};
use crate::numerics::Cursor;

pub const DATASET_MAGIC: &[u8; 4] = b"T2DF";
pub const DATASET_VERSION: u8 = 1;

fn encode_record(seq: &BehaviorSequence, out: &mut Vec<u8>) {
    let mut rec = Vec::with_capacity(12 + seq.items.len() * 12);
    rec.extend_from_slice(&seq.user.to_le_bytes());
    rec.extend_from_slice(&(seq.session_start as u32).to_le_bytes());
    rec.extend_from_slice(&(seq.items.len() as u32).to_le_bytes());
    for &it in &seq.items {
        rec.extend_from_slice(&it.to_le_bytes());
    }
    for &ts in &seq.timestamps {
        rec.extend_from_slice(&ts.to_le_bytes());
    }
    out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
    out.extend_from_slice(&rec);
}

fn decode_record(cur: &mut Cursor<'_>) -> Result<BehaviorSequence> {
    let len = cur.u32()? as usize;
    let start = cur.pos;
    let user = cur.u32()?;
    let session_start = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let items = (0..count).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let timestamps = (0..count).map(|_| cur.i64()).collect::<Result<Vec<_>>>()?;
    if cur.pos - start != len {
        return Err(Error::Format(format!(
            "record length {len} disagrees with its contents ({} bytes)",
            cur.pos - start
        )));
    }
    if count > 0 && session_start >= count {
        return Err(Error::Format("session start outside record".into()));
    }
    Ok(BehaviorSequence {
        user,
        items,
        timestamps,
        session_start,
    })
}

pub fn write_split<W: Write>(split: &DatasetSplit, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&split.user_count.to_le_bytes());
    buf.extend_from_slice(&split.item_count.to_le_bytes());
    buf.extend_from_slice(&split.excluded.to_le_bytes());
    for part in [&split.train, &split.validation, &split.test] {
        buf.extend_from_slice(&(part.len() as u32).to_le_bytes());
        for seq in part {
            encode_record(seq, &mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_split<R: Read>(mut r: R) -> Result<DatasetSplit> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);
    if cur.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a processed dataset (bad magic)".into()));
    }
    let version = cur.take(1)?[0];
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut split = DatasetSplit {
        user_count: cur.u32()?,
        item_count: cur.u32()?,
        excluded: cur.u32()?,
        ..Default::default()
    };
    for part in [&mut split.train, &mut split.validation, &mut split.test] {
        let count = cur.u32()? as usize;
        // Each record needs at least 16 bytes; reject absurd counts early.
        if count > cur.remaining() / 16 + 1 {
            return Err(Error::Format("truncated file".into()));
        }
        part.reserve(count);
        for _ in 0..count {
            part.push(decode_record(&mut cur)?);
        }
    }
    if cur.remaining() != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(split)
}

pub fn persist_split(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_split(split, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    read_split(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out, SessionRule};

    fn sample() -> DatasetSplit {
        let seqs: Vec<BehaviorSequence> = (1..=3)
            .map(|u| BehaviorSequence {
                user: u,
                items: (1..=4 + u).collect(),
                timestamps: (0..4 + u as i64).map(|t| t * 60).collect(),
                session_start: 0,
            })
            .collect();
        leave_one_out(&seqs, 3, 7, SessionRule::default())
    }

    #[test]
    fn round_trip() {
        let split = sample();
        let mut buf = Vec::new();
        write_split(&split, &mut buf).unwrap();
        assert_eq!(read_split(&buf[..]).unwrap(), split);
    }

    #[test]
    fn empty_split_has_header() {
        let mut buf = Vec::new();
        write_split(&DatasetSplit::default(), &mut buf).unwrap();
        assert_eq!(&buf[..4], DATASET_MAGIC);
        assert_eq!(buf.len(), 4 + 1 + 12 + 12);
        assert_eq!(read_split(&buf[..]).unwrap(), DatasetSplit::default());
    }

    #[test]
    fn corrupt_inputs() {
        let mut buf = Vec::new();
        write_split(&sample(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_split(&bad[..]), Err(Error::Format(_))));
        let mut version = buf.clone();
        version[4] = 9;
        assert!(matches!(read_split(&version[..]), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(read_split(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }
}
