use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::geometry::{BehaviorDescriptor, Centroids};
use crate::policy::{Architecture, Genotype};

/// Which MAP-Elites flavour produced (and governs insertion into) an archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "me")]
    Me,
    #[serde(rename = "me-ls")]
    MeLs,
    #[serde(rename = "me-sampling")]
    MeSampling,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Me, Variant::MeLs, Variant::MeSampling];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Me => "me",
            Variant::MeLs => "me-ls",
            Variant::MeSampling => "me-sampling",
        }
    }

    /// Episodes per candidate: one for plain MAP-Elites, ten otherwise.
    pub fn default_evals(self) -> usize {
        match self {
            Variant::Me => 1,
            Variant::MeLs | Variant::MeSampling => 10,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (expected me, me-ls or me-sampling)")))
    }
}

/// An elite together with its evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub genotype: Genotype,
    pub fitness: f64,
    pub bd: BehaviorDescriptor,
    pub spread: Option<f64>,
    pub n_evals: u32,
}

/// Summary statistics of an archive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepertoireStats {
    pub coverage: f64,
    pub max_fitness: f64,
    pub qd_score: f64,
}

/// CVT archive holding at most one elite per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Repertoire {
    pub centroids: Centroids,
    /// Where the centroids live on disk, relative to the repertoire file.
    pub centroids_ref: Option<String>,
    pub cells: BTreeMap<usize, CellRecord>,
    pub env: EnvSpec,
    pub algo: Variant,
    pub rng_seed: u64,
}

impl Repertoire {
    pub fn new(centroids: Centroids, env: EnvSpec, algo: Variant, rng_seed: u64) -> Self {
        Self {
            centroids,
            centroids_ref: None,
            cells: BTreeMap::new(),
            env,
            algo,
            rng_seed,
        }
    }

    /// Same centroids and metadata, no elites.
    pub fn empty_like(&self) -> Self {
        Self {
            centroids: self.centroids.clone(),
            centroids_ref: self.centroids_ref.clone(),
            cells: BTreeMap::new(),
            env: self.env.clone(),
            algo: self.algo,
            rng_seed: self.rng_seed,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.centroids.n_cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        self.cells.len() as f64 / self.n_cells() as f64
    }

    pub fn max_fitness(&self) -> Option<f64> {
        self.cells.values().map(|c| c.fitness).reduce(f64::max)
    }

    /// Sum over occupied cells of `fitness + fitness_offset`.
    pub fn qd_score(&self, fitness_offset: f64) -> f64 {
        self.cells.values().map(|c| c.fitness + fitness_offset).sum()
    }

    pub fn stats(&self) -> RepertoireStats {
        RepertoireStats {
            coverage: self.coverage(),
            max_fitness: self.max_fitness().unwrap_or(f64::NAN),
            qd_score: self.qd_score(self.env.fitness_offset()),
        }
    }

    pub fn cell_of(&self, bd: &BehaviorDescriptor) -> Result<usize> {
        if bd.dim() != self.centroids.dim {
            return Err(Error::DimensionMismatch {
                expected: self.centroids.dim,
                actual: bd.dim(),
            });
        }
        if !bd.is_finite() {
            return Err(Error::invalid(format!("non-finite descriptor {:?}", bd.0)));
        }
        Ok(self.centroids.nearest_cell(bd.coords()))
    }

    /// MAP-Elites rule: take an empty cell, or beat the incumbent's fitness.
    pub fn insert_me(&mut self, candidate: CellRecord) -> Result<bool> {
        let cell = self.cell_of(&candidate.bd)?;
        let accept = match self.cells.get(&cell) {
            None => true,
            Some(incumbent) => candidate.fitness > incumbent.fitness,
        };
        if accept {
            self.cells.insert(cell, candidate);
        }
        Ok(accept)
    }

    /// Low-spread rule: take an empty cell, or beat the incumbent on fitness
    /// and on spread at the same time.
    pub fn insert_me_ls(&mut self, candidate: CellRecord) -> Result<bool> {
        let Some(spread) = candidate.spread else {
            return Err(Error::invalid("low-spread insertion needs a candidate spread"));
        };
        let cell = self.cell_of(&candidate.bd)?;
        let accept = match self.cells.get(&cell) {
            None => true,
            Some(incumbent) => {
                let incumbent_spread = incumbent.spread.unwrap_or(f64::INFINITY);
                candidate.fitness > incumbent.fitness && spread < incumbent_spread
            }
        };
        if accept {
            self.cells.insert(cell, candidate);
        }
        Ok(accept)
    }

    /// Sampling rule: fitness-only like [`Self::insert_me`], applied to the
    /// mean fitness and geometric-median descriptor the caller computed.
    pub fn insert_me_sampling(&mut self, candidate: CellRecord) -> Result<bool> {
        self.insert_me(candidate)
    }

    pub fn insert(&mut self, variant: Variant, candidate: CellRecord) -> Result<bool> {
        match variant {
            Variant::Me => self.insert_me(candidate),
            Variant::MeLs => self.insert_me_ls(candidate),
            Variant::MeSampling => self.insert_me_sampling(candidate),
        }
    }

    /// Every stored descriptor maps back to the cell holding it.
    pub fn is_consistent(&self) -> bool {
        self.cells
            .iter()
            .all(|(k, rec)| self.centroids.nearest_cell(rec.bd.coords()) == *k)
    }

    /// Elite whose stored descriptor is closest to `goal`; ties go to the
    /// lowest cell index.
    pub fn nearest_elite(&self, goal: &[f64]) -> Option<(usize, &CellRecord)> {
        let mut best: Option<(f64, usize, &CellRecord)> = None;
        for (k, rec) in &self.cells {
            let d = crate::geometry::euclidean(rec.bd.coords(), goal);
            if best.as_ref().map_or(true, |(bd, _, _)| d < *bd) {
                best = Some((d, *k, rec));
            }
        }
        best.map(|(_, k, r)| (k, r))
    }

    /// Writes the archive as JSON. Centroids go to `centroids_ref` (resolved
    /// against the repertoire's directory), defaulting to a sibling file.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let reference = match &self.centroids_ref {
            Some(r) => r.clone(),
            None => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("repertoire");
                format!("{stem}.centroids.json")
            }
        };
        let centroid_path = dir.join(&reference);
        let up_to_date = Centroids::load(&centroid_path).is_ok_and(|c| c == self.centroids);
        if !up_to_date {
            self.centroids.save(&centroid_path)?;
        }
        self.centroids_ref = Some(reference);
        let file = RepertoireFile::from_repertoire(self);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RepertoireFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let centroid_path: PathBuf = dir.join(&file.centroids_ref);
        if !centroid_path.exists() {
            return Err(Error::MissingArtifact {
                name: "centroids".into(),
                path: centroid_path,
            });
        }
        let centroids = Centroids::load(&centroid_path)?;
        file.into_repertoire(centroids)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepertoireFile {
    env: String,
    episode_len: usize,
    init_noise_sigma: f64,
    algo: Variant,
    arch: Architecture,
    centroids_ref: String,
    cells: Vec<CellEntry>,
    rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellEntry {
    cell_index: usize,
    fitness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spread: Option<f64>,
    bd: Vec<f64>,
    n_evals: u32,
    params: String,
}

pub(crate) fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::invalid(format!("bad base64 parameters: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid("parameter byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl RepertoireFile {
    fn from_repertoire(rep: &Repertoire) -> Self {
        let arch = rep
            .cells
            .values()
            .next()
            .map(|c| c.genotype.arch.clone())
            .unwrap_or_else(|| Architecture::new(rep.env.obs_dim(), vec![], rep.env.act_dim()));
        Self {
            env: rep.env.name().to_string(),
            episode_len: rep.env.episode_len,
            init_noise_sigma: rep.env.init_noise_sigma,
            algo: rep.algo,
            arch,
            centroids_ref: rep.centroids_ref.clone().unwrap_or_default(),
            cells: rep
                .cells
                .iter()
                .map(|(k, c)| CellEntry {
                    cell_index: *k,
                    fitness: c.fitness,
                    spread: c.spread,
                    bd: c.bd.0.clone(),
                    n_evals: c.n_evals,
                    params: encode_f32(&c.genotype.params),
                })
                .collect(),
            rng_seed: rep.rng_seed,
        }
    }

    fn into_repertoire(self, centroids: Centroids) -> Result<Repertoire> {
        let env = EnvSpec::by_name(&self.env)?
            .with_episode_len(self.episode_len)
            .with_init_noise(self.init_noise_sigma);
        env.validate()?;
        let mut rep = Repertoire::new(centroids, env, self.algo, self.rng_seed);
        rep.centroids_ref = Some(self.centroids_ref);
        for entry in self.cells {
            if entry.cell_index >= rep.n_cells() {
                return Err(Error::invalid(format!(
                    "cell index {} out of range for {} cells",
                    entry.cell_index,
                    rep.n_cells()
                )));
            }
            let genotype = Genotype::from_params(self.arch.clone(), decode_f32(&entry.params)?)?;
            let bd = BehaviorDescriptor::new(entry.bd)?;
            if rep.cell_of(&bd)? != entry.cell_index {
                return Err(Error::invalid(format!(
                    "cell {} stores a descriptor belonging to another cell",
                    entry.cell_index
                )));
            }
            rep.cells.insert(
                entry.cell_index,
                CellRecord {
                    genotype,
                    fitness: entry.fitness,
                    bd,
                    spread: entry.spread,
                    n_evals: entry.n_evals,
                },
            );
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn two_cell_rep() -> Repertoire {
        let c = Centroids::from_points(2, 0, vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        Repertoire::new(c, EnvSpec::new(EnvKind::PointOmni), Variant::MeLs, 0)
    }

    fn rec(fitness: f64, spread: Option<f64>, x: f64) -> CellRecord {
        CellRecord {
            genotype: Genotype::zeros(Architecture::new(4, vec![2], 2)),
            fitness,
            bd: BehaviorDescriptor(vec![x, 0.0]),
            spread,
            n_evals: 10,
        }
    }

    #[test]
    fn me_insertion_is_strict() {
        let mut r = two_cell_rep();
        assert!(r.insert_me(rec(4.0, None, 1.0)).unwrap());
        assert!(!r.insert_me(rec(4.0, None, 1.0)).unwrap());
        assert!(r.insert_me(rec(5.0, None, 0.5)).unwrap());
        assert!(!r.insert_me(rec(3.0, None, 0.5)).unwrap());
        assert_eq!(r.len(), 1);
        assert!(r.is_consistent());
    }

    #[test]
    fn me_ls_needs_both_improvements() {
        let mut r = two_cell_rep();
        assert!(r.insert_me_ls(rec(4.0, Some(2.0), 1.0)).unwrap());
        assert!(!r.insert_me_ls(rec(5.0, Some(3.0), 1.0)).unwrap());
        assert!(r.insert_me_ls(rec(5.0, Some(1.0), 1.0)).unwrap());
        assert!(r.insert_me_ls(rec(-100.0, Some(99.0), -1.0)).unwrap());
        assert!(r.insert_me_ls(rec(1.0, None, -1.0)).is_err());
    }

    #[test]
    fn non_finite_descriptors_are_rejected() {
        let mut r = two_cell_rep();
        assert!(r.insert_me(rec(1.0, None, f64::NAN)).is_err());
    }

    #[test]
    fn qd_score_uses_offset() {
        let mut r = two_cell_rep();
        assert_eq!(r.qd_score(10.0), 0.0);
        r.insert_me(rec(-3.0, None, 1.0)).unwrap();
        assert_eq!(r.qd_score(10.0), 7.0);
        let before = r.qd_score(10.0);
        r.insert_me(rec(-9.0, None, -1.0)).unwrap();
        assert!(r.qd_score(10.0) >= before);
    }

    #[test]
    fn nearest_elite_prefers_lower_cell_on_ties() {
        let mut r = two_cell_rep();
        r.insert_me(rec(0.0, None, -1.0)).unwrap();
        r.insert_me(rec(0.0, None, 1.0)).unwrap();
        assert_eq!(r.nearest_elite(&[0.0, 0.0]).unwrap().0, 0);
        assert_eq!(r.nearest_elite(&[0.2, 0.0]).unwrap().0, 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = two_cell_rep();
        let mut a = rec(-1.25, Some(0.5), 1.0);
        a.genotype.params[3] = 0.123_456_78;
        r.insert_me(a).unwrap();
        r.insert_me(rec(-2.0, None, -1.0)).unwrap();
        let path = dir.path().join("rep.json");
        r.save(&path).unwrap();
        let back = Repertoire::load(&path).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.centroids_ref.as_deref(), Some("rep.centroids.json"));
        std::fs::remove_file(dir.path().join("rep.centroids.json")).unwrap();
        assert!(matches!(
            Repertoire::load(&path),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("pgame".parse::<Variant>().is_err());
    }
}
