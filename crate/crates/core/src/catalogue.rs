//! Sock designs, the discrete appearance space and catalogue I/O.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Category cardinalities `(m_1, ..., m_k)` of the appearance space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    sizes: Vec<u32>,
}

impl FeatureSpace {
    pub fn new(sizes: Vec<u32>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("feature space needs at least one feature"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("feature cardinalities must be positive"));
        }
        Ok(FeatureSpace { sizes })
    }

    /// The reference (color, pattern, length) space.
    pub fn reference() -> Self {
        FeatureSpace {
            sizes: vec![32, 13, 3],
        }
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    /// `|U|`, or `None` if it does not fit in a `u64`.
    pub fn cardinality(&self) -> Option<u64> {
        self.sizes
            .iter()
            .try_fold(1u64, |acc, &m| acc.checked_mul(u64::from(m)))
    }

    pub fn vector(&self, values: Vec<u32>) -> Result<FeatureVector> {
        if values.len() != self.dim() {
            return Err(Error::invalid(format!(
                "feature vector has length {}, expected {}",
                values.len(),
                self.dim()
            )));
        }
        for (r, (&v, &m)) in values.iter().zip(&self.sizes).enumerate() {
            if v >= m {
                return Err(Error::invalid(format!(
                    "feature f{} = {v} out of range (cardinality {m})",
                    r + 1
                )));
            }
        }
        Ok(FeatureVector(values))
    }

    // Mixed-radix decoding of a flat index into a vector.
    fn decode(&self, mut flat: u64) -> FeatureVector {
        let mut values = vec![0; self.dim()];
        for (slot, &m) in values.iter_mut().zip(&self.sizes).rev() {
            *slot = (flat % u64::from(m)) as u32;
            flat /= u64::from(m);
        }
        FeatureVector(values)
    }

    fn sample(&self, rng: &mut StreamRng) -> FeatureVector {
        FeatureVector(self.sizes.iter().map(|&m| rng.random_range(0..m)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector(Vec<u32>);

impl FeatureVector {
    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u32>> for FeatureVector {
    fn from(values: Vec<u32>) -> Self {
        FeatureVector(values)
    }
}

/// Normalized Hamming dissimilarity: the fraction of differing components.
pub fn dissimilarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "cannot compare feature vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(hamming(a.values(), b.values()))
}

pub fn compatibility(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    dissimilarity(a, b).map(|eta| 1.0 - eta)
}

#[inline]
fn hamming(a: &[u32], b: &[u32]) -> f64 {
    let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
    differing as f64 / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SockDesign {
    pub design_id: String,
    pub features: FeatureVector,
    pub price: u64,
    pub eco: f64,
}

/// Pairwise appearance mismatch between designs, addressed by index.
pub trait PairMetric {
    fn eta(&self, a: usize, b: usize) -> f64;

    fn xi(&self, a: usize, b: usize) -> f64 {
        1.0 - self.eta(a, b)
    }
}

/// Anything the simulator can buy from.
pub trait Assortment: PairMetric {
    fn len(&self) -> usize;
    fn price(&self, design: usize) -> u64;
    fn eco(&self, design: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable list of designs over one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    space: FeatureSpace,
    designs: Vec<SockDesign>,
}

impl Catalogue {
    pub fn new(space: FeatureSpace, designs: Vec<SockDesign>) -> Result<Self> {
        let mut seen = HashSet::new();
        for design in &designs {
            space.vector(design.features.values().to_vec())?;
            if !seen.insert(design.design_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate design_id {}",
                    design.design_id
                )));
            }
            if !(design.eco >= 0.0) {
                return Err(Error::invalid(format!(
                    "design {} has negative eco proxy",
                    design.design_id
                )));
            }
        }
        Ok(Catalogue { space, designs })
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn designs(&self) -> &[SockDesign] {
        &self.designs
    }

    pub fn design(&self, index: usize) -> &SockDesign {
        &self.designs[index]
    }

    /// Catalogue restricted to the given design indices (duplicates kept once).
    pub fn subset(&self, indices: &[usize]) -> Catalogue {
        let mut seen = HashSet::new();
        let designs = indices
            .iter()
            .filter(|&&i| seen.insert(i))
            .map(|&i| self.designs[i].clone())
            .collect();
        Catalogue {
            space: self.space.clone(),
            designs,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["design_id".to_string()];
        header.extend((1..=self.space.dim()).map(|r| format!("f{r}")));
        header.push("price".into());
        out.write_record(&header)?;
        for design in &self.designs {
            let mut row = vec![design.design_id.clone()];
            row.extend(design.features.values().iter().map(u32::to_string));
            row.push(design.price.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<catalogue>", e))?;
        Ok(())
    }

    /// Total weight of the distinct `(feature, value)` categories covered by
    /// `selection`.
    pub fn category_coverage(
        &self,
        selection: &[usize],
        weight: impl Fn(usize, u32) -> f64,
    ) -> f64 {
        let covered: HashSet<(usize, u32)> = selection
            .iter()
            .flat_map(|&i| {
                self.designs[i]
                    .features
                    .values()
                    .iter()
                    .copied()
                    .enumerate()
            })
            .collect();
        covered.into_iter().map(|(r, v)| weight(r, v)).sum()
    }
}

impl PairMetric for Catalogue {
    fn eta(&self, a: usize, b: usize) -> f64 {
        hamming(
            self.designs[a].features.values(),
            self.designs[b].features.values(),
        )
    }
}

impl Assortment for Catalogue {
    fn len(&self) -> usize {
        self.designs.len()
    }

    fn price(&self, design: usize) -> u64 {
        self.designs[design].price
    }

    fn eco(&self, design: usize) -> f64 {
        self.designs[design].eco
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSampling {
    /// Distinct vectors while `n_designs <= |U|`, otherwise with replacement.
    #[default]
    Auto,
    Distinct,
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueSpec {
    pub n_designs: usize,
    pub feature_sizes: Vec<u32>,
    pub price_min: u64,
    pub price_max: u64,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub sampling: FeatureSampling,
}

impl CatalogueSpec {
    pub fn reference(seed: u64) -> Self {
        CatalogueSpec {
            n_designs: 1248,
            feature_sizes: vec![32, 13, 3],
            price_min: 5,
            price_max: 15,
            alpha: 1.0,
            seed,
            sampling: FeatureSampling::Auto,
        }
    }
}

pub fn generate_catalogue(spec: &CatalogueSpec) -> Result<Catalogue> {
    if spec.n_designs == 0 {
        return Err(Error::invalid("n_designs must be positive"));
    }
    if spec.price_min > spec.price_max {
        return Err(Error::invalid(format!(
            "empty price range [{}, {}]",
            spec.price_min, spec.price_max
        )));
    }
    if !(spec.alpha >= 0.0) || !spec.alpha.is_finite() {
        return Err(Error::invalid("alpha must be a nonnegative number"));
    }
    let space = FeatureSpace::new(spec.feature_sizes.clone())?;
    let n = spec.n_designs as u64;
    let fits = space.cardinality().is_none_or(|card| n <= card);
    let distinct = match spec.sampling {
        FeatureSampling::Auto => fits,
        FeatureSampling::Distinct if !fits => {
            return Err(Error::invalid(format!(
                "cannot draw {} distinct feature vectors from a space of {}",
                spec.n_designs,
                space.cardinality().unwrap_or(u64::MAX)
            )))
        }
        FeatureSampling::Distinct => true,
        FeatureSampling::WithReplacement => false,
    };

    let mut rng = crate::rng::stream(spec.seed, 0, crate::rng::CATALOGUE);
    let vectors: Vec<FeatureVector> = if distinct {
        match space.cardinality().and_then(|c| usize::try_from(c).ok()) {
            Some(card) => index::sample(&mut rng, card, spec.n_designs)
                .into_iter()
                .map(|flat| space.decode(flat as u64))
                .collect(),
            None => {
                let mut seen = HashSet::with_capacity(spec.n_designs);
                let mut out = Vec::with_capacity(spec.n_designs);
                while out.len() < spec.n_designs {
                    let v = space.sample(&mut rng);
                    if seen.insert(v.clone()) {
                        out.push(v);
                    }
                }
                out
            }
        }
    } else {
        (0..spec.n_designs).map(|_| space.sample(&mut rng)).collect()
    };

    let width = spec.n_designs.to_string().len();
    let designs = vectors
        .into_iter()
        .enumerate()
        .map(|(i, features)| {
            let price = rng.random_range(spec.price_min..=spec.price_max);
            SockDesign {
                design_id: format!("d{:0width$}", i + 1),
                features,
                price,
                eco: spec.alpha * price as f64,
            }
        })
        .collect();
    Catalogue::new(space, designs)
}

pub fn load_catalogue(path: &Path, space: &FeatureSpace, alpha: f64) -> Result<Catalogue> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_catalogue(file, path, space, alpha)
}

pub fn read_catalogue<R: Read>(
    reader: R,
    path: &Path,
    space: &FeatureSpace,
    alpha: f64,
) -> Result<Catalogue> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let k = space.dim();
    let mut expected = vec!["design_id".to_string()];
    expected.extend((1..=k).map(|r| format!("f{r}")));
    expected.push("price".into());
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", expected.join(",")),
        ));
    }

    let mut designs = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != k + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", k + 2, record.len()),
            ));
        }
        let design_id = record[0].to_string();
        if design_id.is_empty() {
            return Err(parse_err(line, "empty design_id".into()));
        }
        let mut values = Vec::with_capacity(k);
        for r in 0..k {
            let raw = &record[r + 1];
            let v: u32 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("f{} = `{raw}` is not a category index", r + 1)))?;
            values.push(v);
        }
        let features = space
            .vector(values)
            .map_err(|e| parse_err(line, e.to_string()))?;
        let raw_price = &record[k + 1];
        let price: u64 = raw_price
            .parse()
            .map_err(|_| parse_err(line, format!("price `{raw_price}` is not a nonnegative integer")))?;
        if !seen.insert(design_id.clone()) {
            return Err(parse_err(line, format!("duplicate design_id {design_id}")));
        }
        designs.push(SockDesign {
            design_id,
            features,
            price,
            eco: alpha * price as f64,
        });
    }
    Catalogue::new(space.clone(), designs)
}
