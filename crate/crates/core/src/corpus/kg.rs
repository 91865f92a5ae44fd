use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize;
use super::{open_lines, CorpusError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// A linked entity occurrence: tokens `start..start + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub len: usize,
    pub entity: EntityId,
}

/// Maps token sequences to entity occurrences.
pub trait EntityLinker {
    /// Non-overlapping spans ordered by start position.
    fn link_spans(&self, tokens: &[String]) -> Vec<EntitySpan>;

    fn link(&self, tokens: &[String]) -> Vec<EntityId> {
        self.link_spans(tokens).into_iter().map(|s| s.entity).collect()
    }
}

/// Entities, relations and triples plus the surface lexicon used for
/// linking. Entity and relation ids follow sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    /// `(surface tokens, entity)` in lexicon file order.
    lexicon: Vec<(Vec<String>, EntityId)>,
    #[serde(skip)]
    entity_index: HashMap<String, EntityId>,
    #[serde(skip)]
    surface_index: HashMap<Vec<String>, EntityId>,
    #[serde(skip)]
    max_surface_len: usize,
}

/// Loader output: the graph plus rejected triple lines.
#[derive(Clone, Debug, Default)]
pub struct KgLoad {
    pub kg: KnowledgeGraph,
    pub rejected: Vec<(usize, String)>,
}

impl KnowledgeGraph {
    /// Builds a graph from `(surface, entity)` lexicon pairs and raw
    /// `(head, relation, tail)` name triples. Triples whose endpoints are not
    /// lexicon entities are rejected and returned with their index.
    pub fn from_parts(
        lexicon: &[(String, String)],
        triples: &[(String, String, String)],
    ) -> Result<(Self, Vec<(usize, String)>), CorpusError> {
        let names: BTreeSet<&str> = lexicon.iter().map(|(_, e)| e.as_str()).collect();
        let entities: Vec<String> = names.into_iter().map(str::to_string).collect();
        let entity_index: HashMap<String, EntityId> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), EntityId(i as u32)))
            .collect();

        let mut surfaces = Vec::with_capacity(lexicon.len());
        let mut surface_index: HashMap<Vec<String>, EntityId> = HashMap::new();
        for (i, (surface, entity)) in lexicon.iter().enumerate() {
            let toks = tokenize(surface);
            if toks.is_empty() {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    message: "empty lexicon surface".into(),
                });
            }
            let id = entity_index[entity];
            match surface_index.get(&toks) {
                Some(&prev) if prev != id => {
                    return Err(CorpusError::Malformed {
                        line: i + 1,
                        message: format!("surface '{surface}' maps to two entities"),
                    })
                }
                Some(_) => continue,
                None => {
                    surface_index.insert(toks.clone(), id);
                    surfaces.push((toks, id));
                }
            }
        }

        let mut rejected = Vec::new();
        let mut accepted = Vec::new();
        for (i, (h, r, t)) in triples.iter().enumerate() {
            match (entity_index.get(h), entity_index.get(t)) {
                (Some(&hd), Some(&tl)) => accepted.push((hd, r.clone(), tl)),
                (None, _) => rejected.push((i, format!("unknown head entity '{h}'"))),
                (_, None) => rejected.push((i, format!("unknown tail entity '{t}'"))),
            }
        }
        let relations: Vec<String> = accepted
            .iter()
            .map(|(_, r, _)| r.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rel_index: HashMap<&str, RelationId> = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), RelationId(i as u32)))
            .collect();
        let triples: Vec<Triple> = accepted
            .iter()
            .map(|(h, r, t)| Triple {
                head: *h,
                relation: rel_index[r.as_str()],
                tail: *t,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut kg = Self {
            entities,
            relations,
            triples,
            lexicon: surfaces,
            entity_index: HashMap::new(),
            surface_index: HashMap::new(),
            max_surface_len: 0,
        };
        kg.rebuild_indexes();
        Ok((kg, rejected))
    }

    /// Restores lookup tables after deserialization.
    pub fn rebuild_indexes(&mut self) {
        self.entity_index = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), EntityId(i as u32)))
            .collect();
        self.surface_index = self.lexicon.iter().cloned().collect();
        self.max_surface_len = self.lexicon.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    /// Surface token sequences registered for `id`.
    pub fn surfaces(&self, id: EntityId) -> impl Iterator<Item = &[String]> + '_ {
        self.lexicon
            .iter()
            .filter(move |(_, e)| *e == id)
            .map(|(s, _)| s.as_slice())
    }

    /// Greedy longest-match linking, left to right, non-overlapping.
    pub fn link_entities<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<EntityId> {
        let owned: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        self.link(&owned)
    }
}

impl EntityLinker for KnowledgeGraph {
    fn link_spans(&self, tokens: &[String]) -> Vec<EntitySpan> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_surface_len.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                self.surface_index
                    .get(&tokens[i..i + len])
                    .map(|&entity| EntitySpan {
                        start: i,
                        len,
                        entity,
                    })
            });
            match hit {
                Some(span) => {
                    i += span.len;
                    out.push(span);
                }
                None => i += 1,
            }
        }
        out
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>, CorpusError> {
    let reader = open_lines(path)?;
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push((i + 1, line.split('\t').map(|f| f.trim().to_string()).collect()));
    }
    Ok(rows)
}

/// Reads `kg.tsv` (`head \t relation \t tail`) and `lexicon.tsv`
/// (`surface \t entity`). The entity set is the set of lexicon entities.
/// Malformed lexicon lines are fatal; bad triples are rejected and reported
/// with their line numbers.
pub fn load_kg(kg_path: &Path, lexicon_path: &Path) -> Result<KgLoad, CorpusError> {
    let mut lexicon = Vec::new();
    for (line, fields) in read_tsv(lexicon_path)? {
        match fields.as_slice() {
            [surface, entity] if !entity.is_empty() => {
                lexicon.push((surface.clone(), entity.clone()))
            }
            _ => {
                return Err(CorpusError::Malformed {
                    line,
                    message: "lexicon line must be 'surface<TAB>entity'".into(),
                })
            }
        }
    }
    let mut triples = Vec::new();
    let mut lines = Vec::new();
    let mut rejected = Vec::new();
    for (line, fields) in read_tsv(kg_path)? {
        match fields.as_slice() {
            [h, r, t] => {
                triples.push((h.clone(), r.clone(), t.clone()));
                lines.push(line);
            }
            _ => rejected.push((line, "expected 3 tab-separated fields".to_string())),
        }
    }
    let (kg, bad) = KnowledgeGraph::from_parts(&lexicon, &triples)?;
    rejected.extend(bad.into_iter().map(|(i, why)| (lines[i], why)));
    rejected.sort();
    Ok(KgLoad { kg, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn tri(ts: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
        ts.iter()
            .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
            .collect()
    }

    #[test]
    fn three_triples_over_four_entities() {
        let (kg, rejected) = KnowledgeGraph::from_parts(
            &lex(&[("a", "A"), ("b", "B"), ("c", "C"), ("d", "D")]),
            &tri(&[("A", "r", "B"), ("B", "s", "C"), ("C", "r", "D")]),
        )
        .unwrap();
        assert!(rejected.is_empty());
        assert_eq!(kg.entity_count(), 4);
        assert_eq!(kg.relation_count(), 2);
        assert_eq!(kg.triples().len(), 3);
    }

    #[test]
    fn unknown_tail_is_rejected_and_counted() {
        let (kg, rejected) = KnowledgeGraph::from_parts(
            &lex(&[("a", "A"), ("b", "B")]),
            &tri(&[("A", "r", "B"), ("A", "r", "Z")]),
        )
        .unwrap();
        assert_eq!(rejected.len(), 1);
        assert!(rejected[0].1.contains("tail"));
        assert_eq!(kg.triples().len(), 1);
    }

    #[test]
    fn empty_triples_give_edgeless_graph() {
        let (kg, rejected) =
            KnowledgeGraph::from_parts(&lex(&[("a", "A"), ("b", "B")]), &[]).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(kg.entity_count(), 2);
        assert!(kg.triples().is_empty());
    }

    #[test]
    fn conflicting_surface_is_an_error() {
        assert!(KnowledgeGraph::from_parts(&lex(&[("a", "A"), ("a", "B")]), &[]).is_err());
    }

    fn brute_force_longest(kg: &KnowledgeGraph, toks: &[String]) -> Vec<EntityId> {
        // Oracle: at each position scan every lexicon entry and take the
        // longest one that matches there.
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let mut best: Option<(usize, EntityId)> = None;
            for (surface, e) in &kg.lexicon {
                let n = surface.len();
                if i + n <= toks.len()
                    && toks[i..i + n] == surface[..]
                    && best.is_none_or(|(bn, _)| n > bn)
                {
                    best = Some((n, *e));
                }
            }
            match best {
                Some((n, e)) => {
                    out.push(e);
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }

    #[test]
    fn longest_match_wins_over_nested_key() {
        let (kg, _) =
            KnowledgeGraph::from_parts(&lex(&[("new york", "NY"), ("york", "Y"), ("new", "N")]), &[])
                .unwrap();
        let toks = tokenize("I love new york and york");
        let got = kg.link_entities(&toks);
        assert_eq!(got, brute_force_longest(&kg, &toks));
        assert_eq!(
            got.iter().map(|e| kg.entity_name(*e)).collect::<Vec<_>>(),
            vec!["NY", "Y"]
        );
        let spans = kg.link_spans(&toks);
        assert!(spans.windows(2).all(|w| w[0].start + w[0].len <= w[1].start));
    }

    #[test]
    fn no_match_is_empty() {
        let (kg, _) = KnowledgeGraph::from_parts(&lex(&[("a", "A")]), &[]).unwrap();
        assert!(kg.link_entities(&tokenize("nothing here")).is_empty());
    }

    #[test]
    fn random_texts_agree_with_bruteforce() {
        use rand::{Rng, SeedableRng};
        let words = ["a", "b", "c", "d"];
        let (kg, _) = KnowledgeGraph::from_parts(
            &lex(&[("a b", "AB"), ("a b c", "ABC"), ("b", "B"), ("c d", "CD"), ("d", "D")]),
            &[],
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.random_range(0..12);
            let toks: Vec<String> = (0..n)
                .map(|_| words[rng.random_range(0..4)].to_string())
                .collect();
            assert_eq!(kg.link_entities(&toks), brute_force_longest(&kg, &toks));
        }
    }

    #[test]
    fn loads_from_files_with_line_numbers() {
        use std::io::Write;
        let mut k = tempfile::NamedTempFile::new().unwrap();
        writeln!(k, "A\tr\tB\nA\tr\nB\tr\tQ").unwrap();
        let mut l = tempfile::NamedTempFile::new().unwrap();
        writeln!(l, "alpha\tA\nbeta\tB").unwrap();
        let load = load_kg(k.path(), l.path()).unwrap();
        assert_eq!(load.kg.triples().len(), 1);
        assert_eq!(
            load.rejected.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }
}
