//! Interpretation studies: attention-versus-distance cosine similarity by
//! interatomic distance category, and embedding-distance correlation with a
//! token-n-gram structural fingerprint.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{Encoder, ModelError};
use crate::nn::Scalar;
use crate::tokenizer::{encode, is_atom_token, EncodeError, TokenSequence, Vocabulary};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum AnalysisError {
    #[error("no molecule aligned with its geometry")]
    NoAlignedMolecules,
    #[error("pair set is degenerate: a correlation input has zero variance")]
    DegeneratePairs,
    #[error("fingerprints were built with different hash configurations")]
    HashConfigMismatch,
    #[error("geometry parse error at line {line}: {message}")]
    GeometryParse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Atom symbols and 3-d coordinates (angstroms) in SMILES atom order.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGeometry {
    pub smiles: String,
    pub symbols: Vec<String>,
    pub coords: Vec<[f64; 3]>,
}

impl MoleculeGeometry {
    /// Copy with hydrogen entries removed; corpus SMILES are
    /// implicit-hydrogen, so alignment runs against heavy atoms only.
    pub fn without_hydrogens(&self) -> MoleculeGeometry {
        let mut symbols = Vec::new();
        let mut coords = Vec::new();
        for (s, c) in self.symbols.iter().zip(&self.coords) {
            if s != "H" {
                symbols.push(s.clone());
                coords.push(*c);
            }
        }
        MoleculeGeometry { smiles: self.smiles.clone(), symbols, coords }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.coords[i];
        let b = self.coords[j];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

/// Parse concatenated extended-XYZ-like records: atom count, SMILES line,
/// then `symbol x y z` per atom.
pub fn parse_geometries(text: &str) -> Result<Vec<MoleculeGeometry>, AnalysisError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count: usize = lines[i].trim().parse().map_err(|_| AnalysisError::GeometryParse {
            line: i + 1,
            message: format!("expected an atom count, found `{}`", lines[i]),
        })?;
        let smiles = lines
            .get(i + 1)
            .ok_or_else(|| AnalysisError::GeometryParse {
                line: i + 2,
                message: "missing SMILES line".into(),
            })?
            .trim()
            .to_string();
        let mut symbols = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(count);
        for a in 0..count {
            let lineno = i + 2 + a;
            let line = lines.get(lineno).ok_or_else(|| AnalysisError::GeometryParse {
                line: lineno + 1,
                message: "truncated atom block".into(),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(AnalysisError::GeometryParse {
                    line: lineno + 1,
                    message: format!("expected `symbol x y z`, found `{line}`"),
                });
            }
            let mut xyz = [0.0f64; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                xyz[k] = f.parse().map_err(|_| AnalysisError::GeometryParse {
                    line: lineno + 1,
                    message: format!("bad coordinate `{f}`"),
                })?;
            }
            if xyz.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::GeometryParse {
                    line: lineno + 1,
                    message: "non-finite coordinate".into(),
                });
            }
            symbols.push(fields[0].to_string());
            coords.push(xyz);
        }
        out.push(MoleculeGeometry { smiles, symbols, coords });
        i += 2 + count;
    }
    Ok(out)
}

/// Interatomic distance categories (angstroms): the bins partition (0, 10]
/// and pairs beyond 10 are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceCategory {
    /// d <= 2
    Short,
    /// 2 < d <= 4
    Medium,
    /// 4 < d <= 10
    Long,
}

impl DistanceCategory {
    pub const ALL: [DistanceCategory; 3] =
        [DistanceCategory::Short, DistanceCategory::Medium, DistanceCategory::Long];

    pub fn classify(d: f64) -> Option<Self> {
        if d <= 0.0 {
            None
        } else if d <= 2.0 {
            Some(Self::Short)
        } else if d <= 4.0 {
            Some(Self::Medium)
        } else if d <= 10.0 {
            Some(Self::Long)
        } else {
            None
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Long => "long",
        }
    }
}

/// Payload positions (0-based, frame excluded) of tokens that denote atoms,
/// in SMILES atom order.
pub fn atom_token_alignment(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<usize> {
    seq.payload()
        .iter()
        .enumerate()
        .filter(|(_, &id)| vocab.token_of(id).is_some_and(is_atom_token))
        .map(|(i, _)| i)
        .collect()
}

/// How a pairwise distance becomes the affinity compared against attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffinityTransform {
    /// `exp(-d / d0)`; the default with `d0 = 2` angstroms.
    ExpDecay { d0: f64 },
    /// `1 / d`.
    Inverse,
    /// Constant 1 within the category.
    Binary,
}

impl Default for AffinityTransform {
    fn default() -> Self {
        AffinityTransform::ExpDecay { d0: 2.0 }
    }
}

impl AffinityTransform {
    pub fn apply(&self, d: f64) -> f64 {
        match self {
            AffinityTransform::ExpDecay { d0 } => (-d / d0).exp(),
            AffinityTransform::Inverse => 1.0 / d,
            AffinityTransform::Binary => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exp" => Some(AffinityTransform::default()),
            "inv" => Some(AffinityTransform::Inverse),
            "binary" => Some(AffinityTransform::Binary),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AffinityTransform::ExpDecay { .. } => "exp",
            AffinityTransform::Inverse => "inv",
            AffinityTransform::Binary => "binary",
        }
    }
}

/// Cosine of two equal-length vectors; `None` when either norm vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Mean attention/affinity cosine for one layer and category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryCosine {
    pub layer: usize,
    pub category: DistanceCategory,
    pub mean_cosine: f64,
    pub n_molecules: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDistanceReport {
    pub rows: Vec<CategoryCosine>,
    /// Molecules whose geometry did not align with their tokenization.
    pub n_skipped: usize,
    pub n_aligned: usize,
}

/// Compare head-averaged attention against spatial distances.
///
/// Per molecule the attention map at `layer` is restricted to atom-token
/// rows/columns; for every ordered atom pair whose distance falls in a
/// category, the attention weight and the transformed distance join that
/// category's vectors, and their cosine is averaged over molecules.
pub fn attention_distance_cosine<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    geometries: &[MoleculeGeometry],
    layer: usize,
    transform: AffinityTransform,
    analysis_cap: usize,
) -> Result<AttentionDistanceReport, AnalysisError> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut skipped = 0usize;
    let mut aligned = 0usize;
    for geom in geometries {
        let heavy = geom.without_hydrogens();
        let seq = match encode(&heavy.smiles, vocab) {
            Ok(s) => s,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let atoms = atom_token_alignment(&seq, vocab);
        if atoms.len() != heavy.symbols.len() || atoms.is_empty() {
            skipped += 1;
            continue;
        }
        let map = encoder.attention_map(&seq, layer, analysis_cap)?;
        aligned += 1;
        let mut vecs: [(Vec<f64>, Vec<f64>); 3] = Default::default();
        for (ai, &pi) in atoms.iter().enumerate() {
            for (aj, &pj) in atoms.iter().enumerate() {
                if ai == aj {
                    continue;
                }
                let d = heavy.distance(ai, aj);
                if let Some(cat) = DistanceCategory::classify(d) {
                    let slot = cat as usize;
                    // +1: payload position -> framed position
                    vecs[slot].0.push(map.pooled.at(pi + 1, pj + 1).as_f64());
                    vecs[slot].1.push(transform.apply(d));
                }
            }
        }
        for (slot, (att, aff)) in vecs.iter().enumerate() {
            if let Some(c) = cosine(att, aff) {
                sums[slot] += c;
                counts[slot] += 1;
            }
        }
    }
    if aligned == 0 {
        return Err(AnalysisError::NoAlignedMolecules);
    }
    let rows = DistanceCategory::ALL
        .iter()
        .map(|&category| {
            let slot = category as usize;
            CategoryCosine {
                layer,
                category,
                mean_cosine: if counts[slot] > 0 { sums[slot] / counts[slot] as f64 } else { f64::NAN },
                n_molecules: counts[slot],
            }
        })
        .collect();
    Ok(AttentionDistanceReport { rows, n_skipped: skipped, n_aligned: aligned })
}

/// Hashed set of token n-grams (n = 1..=nmax) of a tokenized SMILES.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramFingerprint {
    bits: BTreeSet<u16>,
    nmax: usize,
    width: u32,
}

pub const FINGERPRINT_WIDTH: u32 = 2048;
pub const FINGERPRINT_NMAX: usize = 3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl NGramFingerprint {
    /// Fingerprint of the payload tokens of a sequence.
    pub fn from_tokens(tokens: &[&str], nmax: usize, width: u32) -> Self {
        let mut bits = BTreeSet::new();
        for n in 1..=nmax {
            if tokens.len() < n {
                break;
            }
            for window in tokens.windows(n) {
                let gram = window.join("\u{1f}"); // unit separator keeps grams unambiguous
                bits.insert((fnv1a64(gram.as_bytes()) % width as u64) as u16);
            }
        }
        NGramFingerprint { bits, nmax, width }
    }

    pub fn from_smiles(smiles: &str) -> Result<Self, AnalysisError> {
        let tokens = crate::tokenizer::tokenize(smiles)
            .map_err(|e| AnalysisError::Encode(EncodeError::Tokenize(e)))?;
        let refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
        Ok(Self::from_tokens(&refs, FINGERPRINT_NMAX, FINGERPRINT_WIDTH))
    }

    pub fn bit_count(&self) -> usize {
        self.bits.len()
    }

    pub fn intersection_size(&self, other: &Self) -> Result<usize, AnalysisError> {
        if self.nmax != other.nmax || self.width != other.width {
            return Err(AnalysisError::HashConfigMismatch);
        }
        Ok(self.bits.intersection(&other.bits).count())
    }
}

/// `|intersection| / |union|`; two empty fingerprints count as identical (1).
pub fn tanimoto(a: &NGramFingerprint, b: &NGramFingerprint) -> Result<f64, AnalysisError> {
    let inter = a.intersection_size(b)?;
    let union = a.bits.len() + b.bits.len() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Per-pair measurements plus the two correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub rows: Vec<PairRow>,
    /// Pearson between embedding distance and fingerprint Tanimoto.
    pub pearson_tanimoto: f64,
    /// Pearson between embedding distance and shared-n-gram count.
    pub pearson_shared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub embed_dist: f64,
    pub tanimoto: f64,
    pub shared_ngrams: usize,
}

/// Euclidean embedding distance versus structural similarity over molecule
/// pairs. Distances are expected to anti-correlate with both similarity
/// measures on a trained model.
pub fn embedding_similarity_correlation<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    pairs: &[(String, String)],
) -> Result<SimilarityReport, AnalysisError> {
    assert!(pairs.len() >= 2, "need at least two pairs");
    let mut rows = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let ea = encoder.embed_molecule(&encode(a, vocab)?)?;
        let eb = encoder.embed_molecule(&encode(b, vocab)?)?;
        let dist = ea
            .data()
            .iter()
            .zip(eb.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let fa = NGramFingerprint::from_smiles(a)?;
        let fb = NGramFingerprint::from_smiles(b)?;
        rows.push(PairRow {
            embed_dist: dist,
            tanimoto: tanimoto(&fa, &fb)?,
            shared_ngrams: fa.intersection_size(&fb)?,
        });
    }
    let dists: Vec<f64> = rows.iter().map(|r| r.embed_dist).collect();
    let tans: Vec<f64> = rows.iter().map(|r| r.tanimoto).collect();
    let shared: Vec<f64> = rows.iter().map(|r| r.shared_ngrams as f64).collect();
    let pearson_tanimoto = pearson(&dists, &tans).ok_or(AnalysisError::DegeneratePairs)?;
    let pearson_shared = pearson(&dists, &shared).ok_or(AnalysisError::DegeneratePairs)?;
    Ok(SimilarityReport { rows, pearson_tanimoto, pearson_shared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocabulary;

    #[test]
    fn alignment_walks_the_token_list() {
        let (vocab, _) = build_vocabulary(["CC(C)O", "C1CC1", "[nH]"]).unwrap();
        let seq = encode("CC(C)O", &vocab).unwrap();
        assert_eq!(atom_token_alignment(&seq, &vocab), vec![0, 1, 3, 5]);
        let seq = encode("C1CC1", &vocab).unwrap();
        assert_eq!(atom_token_alignment(&seq, &vocab).len(), 3);
        let seq = encode("[nH]", &vocab).unwrap();
        assert_eq!(atom_token_alignment(&seq, &vocab), vec![0]);
    }

    #[test]
    fn categories_partition_zero_to_ten() {
        assert_eq!(DistanceCategory::classify(0.0), None);
        assert_eq!(DistanceCategory::classify(1.5), Some(DistanceCategory::Short));
        assert_eq!(DistanceCategory::classify(2.0), Some(DistanceCategory::Short));
        assert_eq!(DistanceCategory::classify(2.0001), Some(DistanceCategory::Medium));
        assert_eq!(DistanceCategory::classify(4.0), Some(DistanceCategory::Medium));
        assert_eq!(DistanceCategory::classify(9.99), Some(DistanceCategory::Long));
        assert_eq!(DistanceCategory::classify(10.0), Some(DistanceCategory::Long));
        assert_eq!(DistanceCategory::classify(10.5), None);
    }

    #[test]
    fn cosine_is_scale_invariant_and_detects_orthogonality() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 4.0, 6.0];
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [5.0, 10.0, 15.0];
        assert!((cosine(&a, &c).unwrap() - cosine(&c, &a).unwrap()).abs() < 1e-12);
        let x = [1.0, 0.0];
        let y = [0.0, 1.0];
        assert_eq!(cosine(&x, &y), Some(0.0));
        assert_eq!(cosine(&x, &[0.0, 0.0]), None);
    }

    #[test]
    fn geometry_parsing_and_hydrogen_dropping() {
        let text = "3\nCO\nC 0.0 0.0 0.0\nO 1.4 0.0 0.0\nH 2.0 0.5 0.1\n2\nCC\nC 0 0 0\nC 1.5 0 0\n";
        let geoms = parse_geometries(text).unwrap();
        assert_eq!(geoms.len(), 2);
        let heavy = geoms[0].without_hydrogens();
        assert_eq!(heavy.symbols, vec!["C", "O"]);
        assert!((heavy.distance(0, 1) - 1.4).abs() < 1e-12);

        assert!(matches!(
            parse_geometries("x\nCC\n").unwrap_err(),
            AnalysisError::GeometryParse { line: 1, .. }
        ));
        assert!(parse_geometries("2\nCC\nC 0 0 0\n").is_err());
        assert!(parse_geometries("1\nC\nC 0 zero 0\n").is_err());
    }

    #[test]
    fn fingerprint_hand_counts() {
        // {a,b} vs {b,c}: intersection 1, union 3
        let fa = NGramFingerprint::from_tokens(&["a", "b"], 1, 2048);
        let fb = NGramFingerprint::from_tokens(&["b", "c"], 1, 2048);
        assert!((tanimoto(&fa, &fb).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let fa = NGramFingerprint::from_smiles("CCO").unwrap();
        assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
        let fb = NGramFingerprint::from_smiles("NNS").unwrap();
        assert_eq!(tanimoto(&fa, &fb).unwrap(), 0.0);

        // deterministic across calls
        assert_eq!(fa, NGramFingerprint::from_smiles("CCO").unwrap());

        let other = NGramFingerprint::from_tokens(&["C"], 2, 1024);
        assert_eq!(tanimoto(&fa, &other).unwrap_err(), AnalysisError::HashConfigMismatch);
    }

    #[test]
    fn ngram_windows_cover_orders_one_to_three() {
        let f = NGramFingerprint::from_tokens(&["C", "C", "O"], 3, 1 << 14);
        // 1-grams {C, O} -> 2 distinct; 2-grams {CC, CO} -> 2; 3-grams {CCO} -> 1
        assert_eq!(f.bit_count(), 5);
    }

    #[test]
    fn pearson_signs_and_degeneracy() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &down).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0; 4]), None);
    }

    #[test]
    fn tokenizes_atoms_only_for_fingerprints() {
        // identical molecules in every pair -> zero distance, tanimoto 1
        let fa = NGramFingerprint::from_smiles("CC(C)O").unwrap();
        let fb = NGramFingerprint::from_smiles("CC(C)O").unwrap();
        assert_eq!(tanimoto(&fa, &fb).unwrap(), 1.0);
        assert_eq!(fa.intersection_size(&fb).unwrap(), fa.bit_count());
    }
}
