//! Stage two: zone-based policy selection, trajectory datasets in the `QDT1`
//! binary format, and pruning schemes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::envs::{EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{build_cvt, BdSpace, Centroids};
use crate::policy::Genotype;
use crate::qd::Repertoire;
use crate::rng::{derive_seed, derived_rng, stream};

pub const MAGIC: &[u8; 4] = b"QDT1";
pub const VERSION: u32 = 1;
pub const DEFAULT_ZONES: usize = 32;
pub const DEFAULT_PROBE_EPISODES: usize = 5;
pub const DEFAULT_TRAJECTORIES: usize = 4000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub env: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episode_len: usize,
    pub bd_dim: usize,
}

impl DatasetHeader {
    pub fn for_env(env: &EnvSpec) -> Self {
        Self {
            env: env.name().to_string(),
            obs_dim: env.obs_dim(),
            act_dim: env.act_dim(),
            episode_len: env.episode_len,
            bd_dim: env.bd_dim(),
        }
    }

    /// Bytes per record on disk.
    pub fn record_size(&self) -> usize {
        8 + 4 * (1 + 2 * self.bd_dim + self.episode_len * (self.obs_dim + self.act_dim))
    }

    fn preamble_len(&self) -> usize {
        4 + 6 * 4 + 4 + self.env.len()
    }

    fn check(&self, rec: &Record) -> Result<()> {
        let ok = rec.achieved_bd.len() == self.bd_dim
            && rec.conditioning_bd.len() == self.bd_dim
            && rec.observations.len() == self.episode_len * self.obs_dim
            && rec.actions.len() == self.episode_len * self.act_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "record shapes (bd {}/{}, obs {}, act {}) do not match header {self:?}",
                rec.achieved_bd.len(),
                rec.conditioning_bd.len(),
                rec.observations.len(),
                rec.actions.len()
            )))
        }
    }
}

/// One labeled trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub fitness: f32,
    pub achieved_bd: Vec<f32>,
    pub conditioning_bd: Vec<f32>,
    /// `T x obs_dim`, row-major.
    pub observations: Vec<f32>,
    /// `T x act_dim`, row-major.
    pub actions: Vec<f32>,
}

impl Record {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let bd: Vec<f32> = t.bd.coords().iter().map(|&x| x as f32).collect();
        Self {
            seed: t.seed,
            fitness: t.fitness as f32,
            achieved_bd: bd.clone(),
            conditioning_bd: bd,
            observations: t.observations.iter().map(|&x| x as f32).collect(),
            actions: t.actions.iter().map(|&x| x as f32).collect(),
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.fitness.to_le_bytes());
        for v in self
            .achieved_bd
            .iter()
            .chain(&self.conditioning_bd)
            .chain(&self.observations)
            .chain(&self.actions)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn parse(header: &DatasetHeader, bytes: &[u8]) -> Self {
        let seed = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let mut floats = bytes[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let fitness = take(1)[0];
        let achieved_bd = take(header.bd_dim);
        let conditioning_bd = take(header.bd_dim);
        let observations = take(header.episode_len * header.obs_dim);
        let actions = take(header.episode_len * header.act_dim);
        Self {
            seed,
            fitness,
            achieved_bd,
            conditioning_bd,
            observations,
            actions,
        }
    }

    pub fn obs_row(&self, t: usize, obs_dim: usize) -> &[f32] {
        &self.observations[t * obs_dim..(t + 1) * obs_dim]
    }

    pub fn act_row(&self, t: usize, act_dim: usize) -> &[f32] {
        &self.actions[t * act_dim..(t + 1) * act_dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl TrajectoryDataset {
    pub fn new(header: DatasetHeader, records: Vec<Record>) -> Result<Self> {
        for r in &records {
            header.check(r)?;
        }
        Ok(Self { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.preamble_len() + self.len() * h.record_size());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            h.obs_dim as u32,
            h.act_dim as u32,
            h.episode_len as u32,
            h.bd_dim as u32,
            self.records.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(h.env.len() as u32).to_le_bytes());
        out.extend_from_slice(h.env.as_bytes());
        for r in &self.records {
            r.write_to(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cursor = bytes;
        let (header, n) = parse_preamble(&mut cursor)?;
        let size = header.record_size();
        if cursor.len() != n * size {
            return Err(format!(
                "expected {n} records of {size} bytes, found {} bytes",
                cursor.len()
            ));
        }
        let records = cursor
            .chunks_exact(size.max(1))
            .take(n)
            .map(|c| Record::parse(&header, c))
            .collect();
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn achieved_bds(&self) -> impl Iterator<Item = &[f32]> {
        self.records.iter().map(|r| r.achieved_bd.as_slice())
    }
}

fn read_u32(cursor: &mut &[u8]) -> std::result::Result<u32, String> {
    if cursor.len() < 4 {
        return Err("truncated header".into());
    }
    let (head, rest) = cursor.split_at(4);
    *cursor = rest;
    Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
}

fn parse_preamble(cursor: &mut &[u8]) -> std::result::Result<(DatasetHeader, usize), String> {
    if cursor.len() < 4 || &cursor[..4] != MAGIC {
        return Err("missing QDT1 magic".into());
    }
    *cursor = &cursor[4..];
    let version = read_u32(cursor)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let obs_dim = read_u32(cursor)? as usize;
    let act_dim = read_u32(cursor)? as usize;
    let episode_len = read_u32(cursor)? as usize;
    let bd_dim = read_u32(cursor)? as usize;
    let n = read_u32(cursor)? as usize;
    let name_len = read_u32(cursor)? as usize;
    if cursor.len() < name_len {
        return Err("truncated environment name".into());
    }
    let env = std::str::from_utf8(&cursor[..name_len])
        .map_err(|e| format!("environment name is not UTF-8: {e}"))?
        .to_string();
    *cursor = &cursor[name_len..];
    let header = DatasetHeader {
        env,
        obs_dim,
        act_dim,
        episode_len,
        bd_dim,
    };
    Ok((header, n))
}

/// Random access to records of a dataset file without loading all of it.
pub struct DatasetReader {
    header: DatasetHeader,
    n: usize,
    offset: u64,
    file: BufReader<File>,
    path: std::path::PathBuf,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut fixed = [0u8; 32];
        file.read_exact(&mut fixed).map_err(|e| Error::io(path, e))?;
        let name_len = u32::from_le_bytes(fixed[28..32].try_into().expect("4 bytes")) as usize;
        let mut buf = fixed.to_vec();
        buf.resize(32 + name_len, 0);
        file.read_exact(&mut buf[32..]).map_err(|e| Error::io(path, e))?;
        let mut cursor = buf.as_slice();
        let (header, n) = parse_preamble(&mut cursor).map_err(|r| Error::format(path, r))?;
        let expected = buf.len() as u64 + (n * header.record_size()) as u64;
        let actual = file.get_ref().metadata().map_err(|e| Error::io(path, e))?.len();
        if expected != actual {
            return Err(Error::format(
                path,
                format!("file is {actual} bytes, header implies {expected}"),
            ));
        }
        Ok(Self {
            header,
            n,
            offset: buf.len() as u64,
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn record(&mut self, index: usize) -> Result<Record> {
        if index >= self.n {
            return Err(Error::invalid(format!(
                "record {index} out of range for {} records",
                self.n
            )));
        }
        let size = self.header.record_size();
        let pos = self.offset + (index * size) as u64;
        let mut buf = vec![0u8; size];
        self.file
            .seek(SeekFrom::Start(pos))
            .and_then(|_| self.file.read_exact(&mut buf))
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(Record::parse(&self.header, &buf))
    }
}

/// The policy chosen to represent one zone.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneSelection {
    pub zone: usize,
    pub cell: usize,
    /// Probe episodes that landed in the zone.
    pub hits: usize,
    pub fitness: f64,
    pub genotype: Genotype,
}

/// Coarse tessellation of the descriptor space into selection zones.
pub fn build_zones(space: &BdSpace, n_zones: usize, seed: u64) -> Result<Centroids> {
    if n_zones < 1 {
        return Err(Error::invalid("n_zones must be at least 1"));
    }
    build_cvt(space, n_zones, 100 * n_zones, 100, derive_seed(seed, stream::ZONES, 0))
}

/// For every zone, the elite whose probe episodes most often land in it.
/// Ties go to the higher stored fitness, then the lower cell index; zones
/// without candidates are skipped.
pub fn select_zone_policies(
    rep: &Repertoire,
    n_zones: usize,
    n_probe_eps: usize,
    seed: u64,
) -> Result<Vec<ZoneSelection>> {
    if n_zones < 1 {
        return Err(Error::invalid("n_zones must be at least 1"));
    }
    if rep.is_empty() {
        return Err(Error::invalid("cannot select policies from an empty repertoire"));
    }
    if n_zones > rep.n_cells() {
        return Err(Error::invalid(format!(
            "{n_zones} zones exceed the repertoire's {} cells",
            rep.n_cells()
        )));
    }
    let zones = build_zones(&rep.env.bd_space(), n_zones, seed)?;
    let probe_base = derive_seed(seed, stream::PROBE, 0);
    let elites: Vec<(usize, &crate::qd::CellRecord)> =
        rep.cells.iter().map(|(k, r)| (*k, r)).collect();
    let hits: Vec<(usize, usize)> = elites
        .par_iter()
        .map(|(_, rec)| -> Result<(usize, usize)> {
            let zone = zones.nearest_cell(rec.bd.coords());
            let mut policy = rec.genotype.policy();
            let mut hits = 0;
            for i in 0..n_probe_eps as u64 {
                let t = rep.env.rollout(&mut policy, probe_base.wrapping_add(i))?;
                if zones.nearest_cell(t.bd.coords()) == zone {
                    hits += 1;
                }
            }
            Ok((zone, hits))
        })
        .collect::<Result<_>>()?;
    let mut best: BTreeMap<usize, ZoneSelection> = BTreeMap::new();
    for ((cell, rec), (zone, hits)) in elites.into_iter().zip(hits) {
        let better = match best.get(&zone) {
            None => true,
            Some(b) => hits > b.hits || (hits == b.hits && rec.fitness > b.fitness),
        };
        if better {
            best.insert(
                zone,
                ZoneSelection {
                    zone,
                    cell,
                    hits,
                    fitness: rec.fitness,
                    genotype: rec.genotype.clone(),
                },
            );
        }
    }
    Ok(best.into_values().collect())
}

/// Rolls out `n_total` trajectories, assigning policies round-robin.
pub fn generate_dataset(
    policies: &[&Genotype],
    env: &EnvSpec,
    n_total: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if policies.is_empty() {
        return Err(Error::invalid("no policies to generate trajectories from"));
    }
    let records = (0..n_total)
        .into_par_iter()
        .map(|i| {
            let mut policy = policies[i % policies.len()].policy();
            let t = env.rollout(&mut policy, derive_seed(seed, stream::DATASET, i as u64))?;
            Ok(Record::from_trajectory(&t))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(DatasetHeader::for_env(env), records)
}

/// Dataset from the zone-selected policies.
pub fn make_dataset(
    rep: &Repertoire,
    n_zones: usize,
    n_probe_eps: usize,
    n_total: usize,
    seed: u64,
) -> Result<(Vec<ZoneSelection>, TrajectoryDataset)> {
    let selected = select_zone_policies(rep, n_zones, n_probe_eps, seed)?;
    let policies: Vec<&Genotype> = selected.iter().map(|s| &s.genotype).collect();
    let ds = generate_dataset(&policies, &rep.env, n_total, seed)?;
    Ok((selected, ds))
}

/// Dataset from every elite of the repertoire, without zone selection.
pub fn make_naive_dataset(rep: &Repertoire, n_total: usize, seed: u64) -> Result<TrajectoryDataset> {
    let policies: Vec<&Genotype> = rep.cells.values().map(|c| &c.genotype).collect();
    generate_dataset(&policies, &rep.env, n_total, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PruneScheme {
    Density { p: f64 },
    Tiles { grid_n: usize, keep_parity: usize },
    UpperPart { axis: usize, threshold: f64 },
}

impl fmt::Display for PruneScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneScheme::Density { p } => write!(f, "density:{p}"),
            PruneScheme::Tiles { grid_n, keep_parity } => write!(f, "tiles:{grid_n}:{keep_parity}"),
            PruneScheme::UpperPart { axis, threshold } => write!(f, "upper-part:{axis}:{threshold}"),
        }
    }
}

impl FromStr for PruneScheme {
    type Err = Error;

    /// `density:P`, `tiles:N:PARITY` or `upper-part:AXIS:THRESHOLD`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::invalid(format!("unknown prune scheme `{s}`"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let int = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let scheme = match parts.as_slice() {
            ["density", p] => PruneScheme::Density { p: num(p)? },
            ["tiles", n, parity] => PruneScheme::Tiles {
                grid_n: int(n)?,
                keep_parity: int(parity)?,
            },
            ["upper-part" | "upper_part", axis, t] => PruneScheme::UpperPart {
                axis: int(axis)?,
                threshold: num(t)?,
            },
            _ => return Err(bad()),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl PruneScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PruneScheme::Density { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::invalid(format!("density {p} outside [0, 1]")))
            }
            PruneScheme::Tiles { grid_n: 0, .. } => Err(Error::invalid("tiles need grid_n >= 1")),
            PruneScheme::Tiles { keep_parity, .. } if keep_parity > 1 => {
                Err(Error::invalid("tile parity must be 0 or 1"))
            }
            _ => Ok(()),
        }
    }

    /// Whether a record with descriptor `bd` survives the geometric schemes.
    pub fn keeps_bd(&self, bd: &[f32], space: &BdSpace) -> bool {
        match *self {
            PruneScheme::Density { .. } => true,
            PruneScheme::Tiles { grid_n, keep_parity } => {
                tile_parity(bd, space, grid_n) == keep_parity
            }
            PruneScheme::UpperPart { axis, threshold } => f64::from(bd[axis]) <= threshold,
        }
    }
}

/// Parity of the checkerboard tile containing `bd` (indices clamped to the box).
pub fn tile_parity(bd: &[f32], space: &BdSpace, grid_n: usize) -> usize {
    let sum: usize = bd
        .iter()
        .enumerate()
        .map(|(d, &x)| {
            let (lo, hi) = (space.lower[d], space.upper[d]);
            let idx = ((f64::from(x) - lo) / (hi - lo) * grid_n as f64).floor();
            idx.clamp(0.0, (grid_n - 1) as f64) as usize
        })
        .sum();
    sum % 2
}

pub fn prune_dataset(
    ds: &TrajectoryDataset,
    scheme: PruneScheme,
    space: &BdSpace,
    seed: u64,
) -> Result<TrajectoryDataset> {
    scheme.validate()?;
    if let PruneScheme::UpperPart { axis, .. } = scheme {
        if axis >= ds.header.bd_dim {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {}-D descriptors",
                ds.header.bd_dim
            )));
        }
    }
    let records = match scheme {
        PruneScheme::Density { p } => {
            let mut rng = derived_rng(seed, stream::PRUNE, 0);
            ds.records
                .iter()
                .filter(|_| rng.random::<f64>() < p)
                .cloned()
                .collect()
        }
        _ => ds
            .records
            .iter()
            .filter(|r| scheme.keeps_bd(&r.achieved_bd, space))
            .cloned()
            .collect(),
    };
    Ok(TrajectoryDataset {
        header: ds.header.clone(),
        records,
    })
}

/// Header summary and a `bins x bins` histogram of achieved descriptors
/// (first two axes) as CSV text.
pub fn inspect(ds: &TrajectoryDataset, space: &BdSpace, bins: usize) -> String {
    let h = &ds.header;
    let mut out = format!(
        "# env={} obs_dim={} act_dim={} T={} bd_dim={} n_trajectories={}\n",
        h.env,
        h.obs_dim,
        h.act_dim,
        h.episode_len,
        h.bd_dim,
        ds.len()
    );
    let dims = h.bd_dim.min(2);
    let shape = [bins, if dims == 2 { bins } else { 1 }];
    let mut counts = vec![0usize; shape[0] * shape[1]];
    let bin = |x: f32, d: usize| {
        let (lo, hi) = (space.lower[d], space.upper[d]);
        let i = ((f64::from(x) - lo) / (hi - lo) * bins as f64).floor();
        i.clamp(0.0, (bins - 1) as f64) as usize
    };
    for bd in ds.achieved_bds() {
        let i = bin(bd[0], 0);
        let j = if dims == 2 { bin(bd[1], 1) } else { 0 };
        counts[i * shape[1] + j] += 1;
    }
    out.push_str("bin_x,bin_y,x_lo,x_hi,y_lo,y_hi,count\n");
    let edge = |d: usize, i: usize| {
        space.lower[d] + (space.upper[d] - space.lower[d]) * i as f64 / bins as f64
    };
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            let (y_lo, y_hi) = if dims == 2 {
                (edge(1, j), edge(1, j + 1))
            } else {
                (0.0, 0.0)
            };
            out.push_str(&format!(
                "{i},{j},{},{},{y_lo},{y_hi},{}\n",
                edge(0, i),
                edge(0, i + 1),
                counts[i * shape[1] + j]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::geometry::BehaviorDescriptor;
    use crate::policy::Architecture;
    use crate::qd::{CellRecord, Variant};

    fn random_dataset(seed: u64, n: usize) -> TrajectoryDataset {
        let mut rng = crate::rng::rng_from_seed(seed);
        let header = DatasetHeader {
            env: "point-omni".into(),
            obs_dim: 4,
            act_dim: 2,
            episode_len: rng.random_range(1..12),
            bd_dim: 2,
        };
        let mut f = |k: usize| -> Vec<f32> { (0..k).map(|_| rng.random_range(-20.0..20.0)).collect() };
        let records = (0..n)
            .map(|i| Record {
                seed: i as u64 * 7919,
                fitness: f(1)[0],
                achieved_bd: f(2),
                conditioning_bd: f(2),
                observations: f(header.episode_len * 4),
                actions: f(header.episode_len * 2),
            })
            .collect();
        TrajectoryDataset::new(header, records).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        for s in 0..20 {
            let ds = random_dataset(s, s as usize % 5);
            let bytes = ds.to_bytes();
            let back = TrajectoryDataset::from_bytes(&bytes).unwrap();
            assert_eq!(back, ds);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn layout_is_exact() {
        let ds = random_dataset(3, 2);
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..4], b"QDT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
        assert_eq!(&bytes[32..42], b"point-omni");
        let size = ds.header.record_size();
        assert_eq!(bytes.len(), 42 + 2 * size);
        let second = &bytes[42 + size..];
        assert_eq!(u64::from_le_bytes(second[..8].try_into().unwrap()), 7919);
        assert_eq!(f32::from_le_bytes(second[8..12].try_into().unwrap()), ds.records[1].fitness);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = random_dataset(4, 3);
        let mut bytes = ds.to_bytes();
        bytes.pop();
        assert!(TrajectoryDataset::from_bytes(&bytes).is_err());
        assert!(TrajectoryDataset::from_bytes(b"QDT2").is_err());
    }

    #[test]
    fn random_access_matches_full_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.qdt");
        let ds = random_dataset(5, 7);
        ds.write(&path).unwrap();
        let mut reader = DatasetReader::open(&path).unwrap();
        assert_eq!(reader.len(), 7);
        for i in [6, 0, 3] {
            assert_eq!(reader.record(i).unwrap(), ds.records[i]);
        }
        assert!(reader.record(7).is_err());
        assert_eq!(TrajectoryDataset::read(&path).unwrap(), ds);
    }

    fn tiny_rep(sigma: f64, n_elites: usize) -> Repertoire {
        let env = EnvSpec::new(EnvKind::PointOmni).with_init_noise(sigma);
        let c = build_cvt(&env.bd_space(), 64, 6400, 50, 0).unwrap();
        let mut rep = Repertoire::new(c, env.clone(), Variant::Me, 0);
        let arch = Architecture::new(4, vec![8], 2);
        for s in 0..n_elites as u64 * 4 {
            let g = Genotype::init_random(&arch, s);
            let t = env.rollout(&mut g.policy(), 0).unwrap();
            rep.insert_me(CellRecord {
                genotype: g,
                fitness: t.fitness,
                bd: t.bd,
                spread: None,
                n_evals: 1,
            })
            .unwrap();
            if rep.len() == n_elites {
                break;
            }
        }
        rep
    }

    #[test]
    fn single_elite_gives_one_zone() {
        let rep = tiny_rep(0.0, 1);
        let sel = select_zone_policies(&rep, 8, 5, 0).unwrap();
        assert_eq!(sel.len(), 1);
        let zones = build_zones(&rep.env.bd_space(), 8, 0).unwrap();
        let only = rep.cells.values().next().unwrap();
        assert_eq!(sel[0].zone, zones.nearest_cell(only.bd.coords()));
        assert_eq!(sel[0].hits, 5);
        assert!(select_zone_policies(&rep, 0, 5, 0).is_err());
    }

    #[test]
    fn selection_prefers_hits_then_fitness() {
        let rep = tiny_rep(0.3, 12);
        let sel = select_zone_policies(&rep, 4, 5, 2).unwrap();
        let zones = build_zones(&rep.env.bd_space(), 4, 2).unwrap();
        assert!(sel.len() <= 4);
        for s in &sel {
            let rivals: Vec<_> = rep
                .cells
                .iter()
                .filter(|(_, r)| zones.nearest_cell(r.bd.coords()) == s.zone)
                .collect();
            assert!(rivals.iter().any(|(k, _)| **k == s.cell));
            for (k, r) in rivals {
                let probe = derive_seed(2, stream::PROBE, 0);
                let mut p = r.genotype.policy();
                let hits = (0..5)
                    .filter(|i| {
                        let t = rep.env.rollout(&mut p, probe + i).unwrap();
                        zones.nearest_cell(t.bd.coords()) == s.zone
                    })
                    .count();
                assert!(hits <= s.hits);
                if hits == s.hits && *k != s.cell {
                    assert!(r.fitness < s.fitness || (r.fitness == s.fitness && *k > s.cell));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let rep = tiny_rep(0.0, 1);
        let g = &rep.cells.values().next().unwrap().genotype;
        let ds = generate_dataset(&[g], &rep.env, 100, 3).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(ds.records.iter().all(|r| r.achieved_bd == ds.records[0].achieved_bd));
        assert!(ds.records.iter().all(|r| r.conditioning_bd == r.achieved_bd));
        assert_eq!(ds.to_bytes(), generate_dataset(&[g], &rep.env, 100, 3).unwrap().to_bytes());
        let empty = generate_dataset(&[g], &rep.env, 0, 3).unwrap();
        assert_eq!(TrajectoryDataset::from_bytes(&empty.to_bytes()).unwrap(), empty);
        let t = rep.env.rollout(&mut g.policy(), ds.records[0].seed).unwrap();
        assert_eq!(Record::from_trajectory(&t), ds.records[0]);
        let bd = BehaviorDescriptor(vec![0.0, 0.0]);
        assert_eq!(bd.dim(), ds.header.bd_dim);
    }

    #[test]
    fn density_pruning() {
        let ds = random_dataset(9, 4000);
        let space = BdSpace::cube(2, -15.0, 15.0).unwrap();
        let all = prune_dataset(&ds, PruneScheme::Density { p: 1.0 }, &space, 0).unwrap();
        assert_eq!(all, ds);
        let half = prune_dataset(&ds, PruneScheme::Density { p: 0.5 }, &space, 0).unwrap();
        let bound = 3.0 * 1000f64.sqrt();
        assert!((half.len() as f64 - 2000.0).abs() < bound, "{}", half.len());
        assert!(half.records.iter().all(|r| ds.records.contains(r)));
    }

    #[test]
    fn geometric_pruning_predicates_hold() {
        let ds = random_dataset(10, 500);
        let space = BdSpace::cube(2, -15.0, 15.0).unwrap();
        let up = PruneScheme::UpperPart { axis: 1, threshold: 0.0 };
        let kept = prune_dataset(&ds, up, &space, 0).unwrap();
        assert!(kept.records.iter().all(|r| r.achieved_bd[1] <= 0.0));
        assert_eq!(prune_dataset(&kept, up, &space, 0).unwrap(), kept);
        for parity in 0..2 {
            let t = PruneScheme::Tiles { grid_n: 4, keep_parity: parity };
            let kept = prune_dataset(&ds, t, &space, 0).unwrap();
            assert!(kept
                .records
                .iter()
                .all(|r| tile_parity(&r.achieved_bd, &space, 4) == parity));
            assert!(!kept.is_empty());
        }
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("density:0.3".parse::<PruneScheme>().unwrap(), PruneScheme::Density { p: 0.3 });
        assert_eq!(
            "tiles:4:1".parse::<PruneScheme>().unwrap(),
            PruneScheme::Tiles { grid_n: 4, keep_parity: 1 }
        );
        let up: PruneScheme = "upper-part:1:0".parse().unwrap();
        assert_eq!(up.to_string().parse::<PruneScheme>().unwrap(), up);
        for bad in ["density", "density:2", "blobs:1", "tiles:0:0", "tiles:4:2"] {
            assert!(bad.parse::<PruneScheme>().is_err(), "{bad}");
        }
    }

    #[test]
    fn inspect_counts_every_record() {
        let ds = random_dataset(11, 300);
        let space = BdSpace::cube(2, -15.0, 15.0).unwrap();
        let text = inspect(&ds, &space, 5);
        let total: usize = text
            .lines()
            .skip(2)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 300);
        assert_eq!(text.lines().count(), 2 + 25);
    }
}
