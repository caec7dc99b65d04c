//! Append-only per-sweep records of named scalars, optionally streamed to
//! `trace_<name>.csv` files as they arrive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct TraceStore {
    thin: u64,
    sink: Option<PathBuf>,
    sweeps: Vec<u64>,
    series: BTreeMap<String, Vec<f64>>,
    writers: BTreeMap<String, BufWriter<File>>,
}

impl TraceStore {
    /// In-memory store keeping every `thin`-th sweep.
    pub fn new(thin: u64) -> Result<Self> {
        if thin == 0 {
            return Err(Error::Invalid("thinning must be >= 1".into()));
        }
        Ok(Self {
            thin,
            sink: None,
            sweeps: Vec::new(),
            series: BTreeMap::new(),
            writers: BTreeMap::new(),
        })
    }

    /// Store that also streams every record into `dir/trace_<name>.csv`.
    pub fn with_sink(thin: u64, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut s = Self::new(thin)?;
        s.sink = Some(dir);
        Ok(s)
    }

    pub fn thin(&self) -> u64 {
        self.thin
    }

    /// Whether a sweep index passes the thinning filter.
    pub fn keeps(&self, sweep: u64) -> bool {
        sweep % self.thin == 0
    }

    /// Append one snapshot. Every record must carry the same names, and sweep
    /// indices must be strictly increasing. Sweeps removed by thinning are
    /// silently ignored.
    pub fn record(&mut self, sweep: u64, values: &[(String, f64)]) -> Result<()> {
        if !self.keeps(sweep) {
            return Ok(());
        }
        if let Some(&last) = self.sweeps.last() {
            if sweep <= last {
                return Err(Error::Invalid(format!("trace sweep {sweep} not after {last}")));
            }
            if values.len() != self.series.len() || values.iter().any(|(n, _)| !self.series.contains_key(n)) {
                return Err(Error::Invalid("trace record names differ from earlier records".into()));
            }
        } else {
            for (name, _) in values {
                if self.series.insert(name.clone(), Vec::new()).is_some() {
                    return Err(Error::Invalid(format!("duplicate trace name {name}")));
                }
            }
            if let Some(dir) = &self.sink {
                for name in self.series.keys() {
                    let path = dir.join(format!("trace_{name}.csv"));
                    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let mut w = BufWriter::new(f);
                    writeln!(w, "sweep,value").map_err(|e| Error::io(&path, e))?;
                    self.writers.insert(name.clone(), w);
                }
            }
        }
        self.sweeps.push(sweep);
        for (name, v) in values {
            self.series.get_mut(name).expect("checked above").push(*v);
            if let Some(w) = self.writers.get_mut(name) {
                writeln!(w, "{sweep},{v}").map_err(|e| Error::io(name.as_str(), e))?;
            }
        }
        Ok(())
    }

    pub fn sweeps(&self) -> &[u64] {
        &self.sweeps
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(|s| s.as_str())
    }

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.series.get(name).map(|v| v.as_slice())
    }

    /// Values recorded at sweeps strictly greater than `burn_in`.
    pub fn after(&self, name: &str, burn_in: u64) -> Option<&[f64]> {
        let start = self.sweeps.partition_point(|&s| s <= burn_in);
        self.series(name).map(|v| &v[start..])
    }

    pub fn len(&self) -> usize {
        self.sweeps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sweeps.is_empty()
    }

    /// Flush the streamed files.
    pub fn flush(&mut self) -> Result<()> {
        let dir = self.sink.clone().unwrap_or_default();
        for w in self.writers.values_mut() {
            w.flush().map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    /// Read back a directory of `trace_<name>.csv` files.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|f| f.to_str())
                    .is_some_and(|f| f.starts_with("trace_") && f.ends_with(".csv"))
            })
            .collect();
        entries.sort();
        let mut store = Self::new(1)?;
        for path in entries {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default()["trace_".len()..].to_string();
            let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Csv {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let mut sweeps = Vec::new();
            let mut vals = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| Error::Csv {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let row = sweeps.len() + 2;
                let parse = |i: usize| -> Result<f64> {
                    rec.get(i).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| Error::Csv {
                        path: path.clone(),
                        message: format!("bad number in row {row}"),
                    })
                };
                sweeps.push(parse(0)? as u64);
                vals.push(parse(1)?);
            }
            if store.series.is_empty() {
                store.sweeps = sweeps;
            } else if store.sweeps != sweeps {
                return Err(Error::Csv {
                    path,
                    message: "sweep column differs from other trace files".into(),
                });
            }
            store.series.insert(name, vals);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: f64) -> Vec<(String, f64)> {
        vec![("a".into(), v), ("b".into(), -v)]
    }

    #[test]
    fn thinning_and_ordering() {
        let mut t = TraceStore::new(2).unwrap();
        for s in 1..=6 {
            t.record(s, &rec(s as f64)).unwrap();
        }
        assert_eq!(t.sweeps(), &[2, 4, 6]);
        assert_eq!(t.series("b").unwrap(), &[-2.0, -4.0, -6.0]);
        assert_eq!(t.after("a", 3).unwrap(), &[4.0, 6.0]);
        assert!(t.record(4, &rec(0.0)).is_err());
        assert!(t.record(8, &[("c".into(), 1.0)]).is_err());
    }

    #[test]
    fn streamed_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = TraceStore::with_sink(1, dir.path()).unwrap();
        for s in 1..=3 {
            t.record(s, &rec(0.1 * s as f64)).unwrap();
        }
        t.flush().unwrap();
        drop(t);
        let back = TraceStore::load_dir(dir.path()).unwrap();
        assert_eq!(back.sweeps(), &[1, 2, 3]);
        assert_eq!(back.series("a").unwrap(), &[0.1, 0.2, 0.30000000000000004]);
    }
}
