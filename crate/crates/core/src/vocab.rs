//! Token vocabulary: special tokens, the caption grammar's base words, one
//! token per implicit concept, and one location token per grid cell.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GeomError, Result};
use crate::geometry::BinGrid;

pub const PAD: &str = "<pad>";
pub const EMPTY: &str = "<empty>";
pub const MAX_CAPTION_LEN: usize = 64;

pub const PAD_ID: usize = 0;
pub const EMPTY_ID: usize = 1;

/// Words produced by the scene grammar `a {shade} {shape} on {background}`.
pub const BASE_WORDS: [&str; 11] = [
    "a", "on", "dark", "mid", "light", "circle", "square", "triangle", "plain", "gradient", "noise",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Qr,
    Watermark,
    Text,
}

impl ConceptKind {
    pub const ALL: [ConceptKind; 3] = [ConceptKind::Qr, ConceptKind::Watermark, ConceptKind::Text];

    pub fn name(self) -> &'static str {
        match self {
            ConceptKind::Qr => "qr",
            ConceptKind::Watermark => "watermark",
            ConceptKind::Text => "text",
        }
    }
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConceptKind {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self> {
        ConceptKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeomError::UnknownConcept(s.to_string()))
    }
}

fn location_name(m: usize, n: usize) -> String {
    format!("<l{m},{n}>")
}

fn parse_location(tok: &str) -> Option<(usize, usize)> {
    let inner = tok.strip_prefix("<l")?.strip_suffix('>')?;
    let (m, n) = inner.split_once(',')?;
    Some((m.parse().ok()?, n.parse().ok()?))
}

/// Contiguous token ids. Extension only appends, so ids of existing tokens
/// never change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    base_len: usize,
    concepts: Vec<(ConceptKind, usize)>,
    /// `(first id, cols, rows)` of the location block.
    locations: Option<(usize, usize, usize)>,
}

impl Vocab {
    /// Special tokens and grammar words only.
    pub fn base() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            base_len: 0,
            concepts: Vec::new(),
            locations: None,
        };
        for t in [PAD, EMPTY].into_iter().chain(BASE_WORDS) {
            v.push(t.to_string());
        }
        v.base_len = v.tokens.len();
        v
    }

    /// Base vocabulary plus every concept token and the grid's location tokens.
    pub fn full(grid: &BinGrid) -> Self {
        let mut v = Self::base();
        v.extend(&ConceptKind::ALL, Some(grid))
            .expect("fresh vocabulary has no concept tokens");
        v
    }

    fn push(&mut self, t: String) -> usize {
        let id = self.tokens.len();
        self.ids.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    /// Appends concept and (optionally) location tokens; returns the id range added.
    pub fn extend(&mut self, concepts: &[ConceptKind], grid: Option<&BinGrid>) -> Result<std::ops::Range<usize>> {
        let start = self.tokens.len();
        for &k in concepts {
            if self.ids.contains_key(k.name()) {
                return Err(GeomError::InvalidArgument(format!("concept `{k}` already in vocabulary")));
            }
        }
        if grid.is_some() && self.locations.is_some() {
            return Err(GeomError::InvalidArgument("location tokens already in vocabulary".into()));
        }
        for &k in concepts {
            let id = self.push(k.name().to_string());
            self.concepts.push((k, id));
        }
        if let Some(g) = grid {
            let first = self.tokens.len();
            for n in 1..=g.rows() {
                for m in 1..=g.cols() {
                    self.push(location_name(m, n));
                }
            }
            self.locations = Some((first, g.cols(), g.rows()));
        }
        Ok(start..self.tokens.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn is_base(&self, id: usize) -> bool {
        id < self.base_len
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| GeomError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn concept_id(&self, kind: ConceptKind) -> Result<usize> {
        self.concepts
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, id)| *id)
            .ok_or_else(|| GeomError::UnknownConcept(kind.name().to_string()))
    }

    pub fn concept_id_by_name(&self, name: &str) -> Result<usize> {
        self.concept_id(name.parse()?)
    }

    pub fn is_concept(&self, id: usize) -> bool {
        self.concepts.iter().any(|(_, c)| *c == id)
    }

    pub fn has_locations(&self) -> bool {
        self.locations.is_some()
    }

    /// Location token for a row-major cell index of `grid`.
    pub fn location_id(&self, grid: &BinGrid, cell: usize) -> Result<usize> {
        match self.locations {
            Some((first, cols, rows)) if cols == grid.cols() && rows == grid.rows() && cell < cols * rows => {
                Ok(first + cell)
            }
            Some(_) => Err(GeomError::Grid(format!(
                "cell {cell} of a {}x{} grid has no location token",
                grid.cols(),
                grid.rows()
            ))),
            None => Err(GeomError::UnknownToken("<location>".into())),
        }
    }

    pub fn is_location(&self, id: usize) -> bool {
        self.locations
            .is_some_and(|(first, c, r)| id >= first && id < first + c * r)
    }

    /// Row-major cell index for a location token id.
    pub fn location_cell(&self, id: usize) -> Option<usize> {
        let (first, c, r) = self.locations?;
        (id >= first && id < first + c * r).then(|| id - first)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| GeomError::UnknownToken(format!("#{id}")))
            })
            .collect();
        Ok(words?.join(" "))
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| GeomError::Format(format!("vocab line {}: missing tab", lineno + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| GeomError::Format(format!("vocab line {}: bad id", lineno + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(GeomError::Format("vocab ids must be unique and contiguous from 0".into()));
        }
        let base = Self::base();
        if entries.len() < base.len() || entries.iter().zip(&base.tokens).any(|((_, a), b)| a != b) {
            return Err(GeomError::Format("vocab does not start with the base tokens".into()));
        }
        let mut v = base;
        let mut loc_first = None;
        let (mut cols, mut rows) = (0, 0);
        for (_, tok) in entries.into_iter().skip(v.base_len) {
            if let Some((m, n)) = parse_location(&tok) {
                loc_first.get_or_insert(v.tokens.len());
                cols = cols.max(m);
                rows = rows.max(n);
                v.push(tok);
            } else {
                let kind: ConceptKind = tok.parse()?;
                let id = v.push(tok);
                v.concepts.push((kind, id));
            }
        }
        if let Some(first) = loc_first {
            let ok = v.tokens.len() - first == cols * rows
                && (0..cols * rows).all(|i| v.tokens[first + i] == location_name(i % cols + 1, i / cols + 1));
            if !ok {
                return Err(GeomError::Format("location tokens are not a complete row-major grid".into()));
            }
            v.locations = Some((first, cols, rows));
        }
        Ok(v)
    }
}

/// Pads with PAD (or truncates) to exactly [`MAX_CAPTION_LEN`] tokens.
pub fn pad_caption(tokens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(MAX_CAPTION_LEN).collect();
    out.resize(MAX_CAPTION_LEN, PAD_ID);
    out
}

/// The unconditional caption.
pub fn empty_caption() -> Vec<usize> {
    pad_caption(&[EMPTY_ID])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BinGrid {
        BinGrid::square(32, 8).unwrap()
    }

    #[test]
    fn ids_are_contiguous_and_location_count_matches_grid() {
        let v = Vocab::full(&grid());
        assert_eq!(v.len(), 2 + BASE_WORDS.len() + 3 + 16);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
        let locs = (0..v.len()).filter(|&i| v.is_location(i)).count();
        assert_eq!(locs, grid().total());
    }

    #[test]
    fn location_ids_are_row_major() {
        let g = grid();
        let v = Vocab::full(&g);
        // cell index = n * cols + m (0-based); token label is 1-based
        assert_eq!(v.token(v.location_id(&g, 0).unwrap()), Some("<l1,1>"));
        assert_eq!(v.token(v.location_id(&g, 1).unwrap()), Some("<l2,1>"));
        assert_eq!(v.token(v.location_id(&g, 4).unwrap()), Some("<l1,2>"));
        assert!(v.location_id(&g, 16).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::full(&grid());
        let s = "a dark circle on plain watermark <l2,3> <l3,3>";
        assert_eq!(v.decode(&v.encode(s).unwrap()).unwrap(), s);
        assert!(v.encode("a purple circle").is_err());
    }

    #[test]
    fn tsv_round_trip_preserves_structure() {
        let v = Vocab::full(&grid());
        let back = Vocab::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tsv("<pad>\t0\n<empty>\t2\n").is_err());
    }

    #[test]
    fn extension_keeps_existing_ids() {
        let base = Vocab::base();
        let mut v = base.clone();
        let added = v.extend(&[ConceptKind::Watermark], Some(&grid())).unwrap();
        assert_eq!(added.start, base.len());
        for id in 0..base.len() {
            assert_eq!(v.token(id), base.token(id));
        }
        assert!(v.extend(&[ConceptKind::Watermark], None).is_err());
        assert!(v.concept_id(ConceptKind::Qr).is_err());
    }
}
