//! On-disk formats for posterior draws and crash-safe file writes.
//!
//! Draws are stored as one CSV per chain (`chain_<c>.csv`, header = flat
//! parameter names such as `theta_a.3`, one row per draw, constrained
//! space) and as a binary cache `draws.bin`:
//!
//! ```text
//! magic   8 bytes  "SMDRAWS1"
//! chains  u64, samples u64, dim u64
//! names   dim × (u64 byte length, UTF-8 bytes)
//! chains  × (accept_rate f64, step_size f64, divergences u64,
//!            inv_mass dim × f64, values samples·dim × f64)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Layout;
use crate::sampler::{ChainDraws, PosteriorDraws};

const MAGIC: &[u8; 8] = b"SMDRAWS1";
pub const CACHE_FILE: &str = "draws.bin";

/// Writes `path` through a temporary sibling file that is renamed into place
/// only after `fill` succeeds, so readers never see a partial file.
pub fn atomic_write<F>(path: impl AsRef<Path>, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        let f = w.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn chain_file_name(chain: usize) -> String {
    format!("chain_{}.csv", chain + 1)
}

pub fn write_chain_csv<W: Write>(w: W, draws: &PosteriorDraws, chain: usize) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(draws.names())?;
    for s in 0..draws.samples {
        wr.write_record(draws.draw(chain, s).iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes every chain's CSV plus the binary cache into `dir`; returns the
/// written paths.
pub fn write_draws(dir: impl AsRef<Path>, draws: &PosteriorDraws) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for c in 0..draws.n_chains() {
        let p = dir.join(chain_file_name(c));
        atomic_write(&p, |w| write_chain_csv(w, draws, c))?;
        out.push(p);
    }
    let p = dir.join(CACHE_FILE);
    atomic_write(&p, |w| write_cache(w, draws))?;
    out.push(p);
    Ok(out)
}

/// Reads per-chain CSVs. Sampler statistics are not part of the CSV format
/// and come back zeroed.
pub fn read_chain_csvs<P: AsRef<Path>>(paths: &[P]) -> Result<PosteriorDraws> {
    if paths.is_empty() {
        return Err(Error::Contract("no draw files given".into()));
    }
    let mut layout: Option<Layout> = None;
    let mut samples = None;
    let mut chains = Vec::with_capacity(paths.len());
    for path in paths {
        let mut rd = csv::Reader::from_path(path)?;
        let names: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        let l = Layout::from_param_names(&names)?;
        match &layout {
            Some(prev) if *prev != l => {
                return Err(Error::Contract(format!(
                    "{} has different columns from the first chain",
                    path.as_ref().display()
                )))
            }
            None => layout = Some(l),
            _ => {}
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            for (j, cell) in rec.iter().enumerate() {
                values.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 1,
                    column: names.get(j).cloned().unwrap_or_default(),
                    message: e.to_string(),
                })?);
            }
            rows += 1;
        }
        if *samples.get_or_insert(rows) != rows {
            return Err(Error::Contract("chains differ in length".into()));
        }
        chains.push(ChainDraws {
            values,
            accept_rate: 0.0,
            step_size: 0.0,
            divergences: 0,
            inv_mass: Vec::new(),
        });
    }
    Ok(PosteriorDraws {
        layout: layout.expect("at least one file"),
        samples: samples.unwrap_or(0),
        chains,
    })
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_cache<W: Write>(mut w: W, d: &PosteriorDraws) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u64(&mut w, d.n_chains() as u64)?;
    put_u64(&mut w, d.samples as u64)?;
    put_u64(&mut w, d.dim() as u64)?;
    for name in d.names() {
        put_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
    }
    for c in &d.chains {
        put_f64s(&mut w, &[c.accept_rate, c.step_size])?;
        put_u64(&mut w, c.divergences as u64)?;
        let mut inv_mass = c.inv_mass.clone();
        inv_mass.resize(d.dim(), 0.0);
        put_f64s(&mut w, &inv_mass)?;
        put_f64s(&mut w, &c.values)?;
    }
    w.flush()?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Sanity bound on header counts, so a corrupt file fails cleanly instead
/// of attempting a huge allocation.
const MAX_HEADER_COUNT: u64 = 1 << 32;

pub fn read_cache<R: Read>(r: R) -> Result<PosteriorDraws> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Contract("not a draws cache file".into()));
    }
    let (n_chains, samples, dim) = (get_u64(&mut r)?, get_u64(&mut r)?, get_u64(&mut r)?);
    if [n_chains, samples, dim].iter().any(|&v| v > MAX_HEADER_COUNT) {
        return Err(Error::Contract("corrupt draws cache header".into()));
    }
    let (n_chains, samples, dim) = (n_chains as usize, samples as usize, dim as usize);
    let mut names = Vec::with_capacity(dim);
    for _ in 0..dim {
        let len = get_u64(&mut r)?;
        if len > 1 << 16 {
            return Err(Error::Contract("corrupt parameter name".into()));
        }
        let mut b = vec![0u8; len as usize];
        r.read_exact(&mut b)?;
        names.push(String::from_utf8(b).map_err(|_| Error::Contract("parameter name is not UTF-8".into()))?);
    }
    let layout = Layout::from_param_names(&names)?;
    let mut chains = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        let stats = get_f64s(&mut r, 2)?;
        let divergences = get_u64(&mut r)? as usize;
        let inv_mass = get_f64s(&mut r, dim)?;
        let values = get_f64s(&mut r, samples * dim)?;
        chains.push(ChainDraws {
            values,
            accept_rate: stats[0],
            step_size: stats[1],
            divergences,
            inv_mass,
        });
    }
    Ok(PosteriorDraws { layout, samples, chains })
}

pub fn read_cache_file(path: impl AsRef<Path>) -> Result<PosteriorDraws> {
    read_cache(File::open(path)?)
}
