//! OpenEA benchmark layout (15K, V1).
//!
//! ```text
//! rel_triples_1            head<TAB>relation<TAB>tail   (source graph)
//! rel_triples_2            head<TAB>relation<TAB>tail   (target graph)
//! ent_links                source<TAB>target
//! 721_5fold/<k>/train_links, valid_links, test_links    source<TAB>target
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AlignmentSeedSet, DatasetBundle, DropCounts, IdMap, IdMaps, KnowledgeGraph, Pair, Triple};
use crate::error::{Error, Result};

pub const FOLD_DIR: &str = "721_5fold";
pub const LINK_FILES: [&str; 3] = ["train_links", "valid_links", "test_links"];

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ingest(path, "missing file")
        } else {
            Error::ingest(path, e.to_string())
        }
    })
}

/// Tab-separated records with their 1-based line numbers; blank lines skipped.
fn records<'a>(
    path: &'a Path,
    text: &'a str,
    fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(i, line)| {
            let parts: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if parts.len() != fields || parts.iter().any(|p| p.is_empty()) {
                Err(Error::Malformed {
                    file: path.to_path_buf(),
                    line: i + 1,
                    detail: format!("expected {fields} tab-separated fields, found {}", parts.len()),
                })
            } else {
                Ok((i + 1, parts))
            }
        })
}

fn load_triples(
    path: &Path,
    entities: &mut IdMap,
    relations: &mut IdMap,
) -> Result<(Vec<Triple>, DropCounts)> {
    let text = read_file(path)?;
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let mut drops = DropCounts::default();
    for rec in records(path, &text, 3) {
        let (_, f) = rec?;
        let head = entities.get_or_insert(f[0]);
        let relation = relations.get_or_insert(f[1]);
        let tail = entities.get_or_insert(f[2]);
        let t = Triple::new(head, relation, tail);
        if head == tail {
            drops.self_loops += 1;
        } else if !seen.insert(t) {
            drops.duplicates += 1;
        } else {
            triples.push(t);
        }
    }
    if drops.self_loops + drops.duplicates > 0 {
        log::warn!(
            "{}: dropped {} self-loop and {} duplicate triples",
            path.display(),
            drops.self_loops,
            drops.duplicates
        );
    }
    Ok((triples, drops))
}

fn load_links(path: &Path, source: &IdMap, target: &IdMap) -> Result<Vec<Pair>> {
    let text = read_file(path)?;
    let mut pairs = Vec::new();
    for rec in records(path, &text, 2) {
        let (line, f) = rec?;
        let lookup = |map: &IdMap, uri: &str| {
            map.get(uri).ok_or_else(|| Error::Malformed {
                file: path.to_path_buf(),
                line,
                detail: format!("unknown entity `{uri}`"),
            })
        };
        pairs.push((lookup(source, f[0])?, lookup(target, f[1])?));
    }
    Ok(pairs)
}

/// Loads a dataset directory with the seed split of fold `fold` (1–5).
pub fn load_openea(dir: &Path, fold: u8) -> Result<DatasetBundle> {
    if !(1..=5).contains(&fold) {
        return Err(Error::Config(format!("fold must be in 1..=5, got {fold}")));
    }
    let mut maps = IdMaps::default();
    let (source_triples, source_drops) = load_triples(
        &dir.join("rel_triples_1"),
        &mut maps.source_entities,
        &mut maps.relations,
    )?;
    let (target_triples, target_drops) = load_triples(
        &dir.join("rel_triples_2"),
        &mut maps.target_entities,
        &mut maps.relations,
    )?;

    // ent_links may introduce entities that never occur in a triple
    let links_path = dir.join("ent_links");
    let text = read_file(&links_path)?;
    let mut links = Vec::new();
    for rec in records(&links_path, &text, 2) {
        let (_, f) = rec?;
        links.push((
            maps.source_entities.get_or_insert(f[0]),
            maps.target_entities.get_or_insert(f[1]),
        ));
    }

    let fold_dir: PathBuf = dir.join(FOLD_DIR).join(fold.to_string());
    let mut splits = Vec::with_capacity(3);
    for name in LINK_FILES {
        splits.push(load_links(
            &fold_dir.join(name),
            &maps.source_entities,
            &maps.target_entities,
        )?);
    }
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    if train.is_empty() {
        log::warn!("{}: no training links", fold_dir.join("train_links").display());
    }
    let seeds = AlignmentSeedSet { train, valid, test };

    let relation_count = maps.relations.len();
    let source = KnowledgeGraph::new(maps.source_entities.len(), relation_count, source_triples)?;
    let target = KnowledgeGraph::new(maps.target_entities.len(), relation_count, target_triples)?;
    seeds
        .validate(source.entity_count(), target.entity_count())
        .map_err(|e| Error::ingest(&fold_dir, e.to_string()))?;

    Ok(DatasetBundle {
        source,
        target,
        seeds,
        links,
        id_maps: maps,
        source_drops,
        target_drops,
    })
}

/// Writes `bundle` in the OpenEA layout, placing its seeds under fold `fold`.
pub fn write_openea(bundle: &DatasetBundle, dir: &Path, fold: u8) -> Result<()> {
    if !(1..=5).contains(&fold) {
        return Err(Error::Config(format!("fold must be in 1..=5, got {fold}")));
    }
    let maps = &bundle.id_maps;
    let triples = |kg: &KnowledgeGraph, ents: &IdMap| {
        let mut out = String::new();
        for t in kg.triples() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                ents.uri(t.head),
                maps.relations.uri(t.relation),
                ents.uri(t.tail)
            );
        }
        out
    };
    let pairs = |ps: &[Pair]| {
        let mut out = String::new();
        for &(s, t) in ps {
            let _ = writeln!(
                out,
                "{}\t{}",
                maps.source_entities.uri(s),
                maps.target_entities.uri(t)
            );
        }
        out
    };
    let fold_dir = dir.join(FOLD_DIR).join(fold.to_string());
    fs::create_dir_all(&fold_dir)?;
    fs::write(dir.join("rel_triples_1"), triples(&bundle.source, &maps.source_entities))?;
    fs::write(dir.join("rel_triples_2"), triples(&bundle.target, &maps.target_entities))?;
    fs::write(dir.join("ent_links"), pairs(&bundle.links))?;
    let s = &bundle.seeds;
    for (name, split) in LINK_FILES.iter().zip([&s.train, &s.valid, &s.test]) {
        fs::write(fold_dir.join(name), pairs(split))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, body).unwrap();
    }

    fn toy(dir: &Path) {
        write(dir, "rel_triples_1", "a\tr1\tb\nb\tr2\tc\n");
        write(dir, "rel_triples_2", "x\tr1\ty\ny\tr3\tz\n");
        write(dir, "ent_links", "a\tx\nb\ty\nc\tz\n");
        write(dir, "721_5fold/1/train_links", "a\tx\n");
        write(dir, "721_5fold/1/valid_links", "b\ty\n");
        write(dir, "721_5fold/1/test_links", "c\tz\n");
    }

    #[test]
    fn loads_toy_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        let b = load_openea(tmp.path(), 1).unwrap();
        assert_eq!(b.source.entity_count(), 3);
        assert_eq!(b.source.triples().len(), 2);
        assert_eq!(b.source.triples()[0], Triple::new(0, 0, 1));
        // r1 is shared; r2 and r3 are distinct
        assert_eq!(b.relation_count(), 3);
        assert_eq!(b.target.triples()[0].relation, 0);
        assert_eq!(b.seeds.train, vec![(0, 0)]);
        assert_eq!(b.seeds.test, vec![(2, 2)]);
    }

    #[test]
    fn fold_bounds() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        assert!(matches!(load_openea(tmp.path(), 6), Err(Error::Config(_))));
        assert!(matches!(load_openea(tmp.path(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        fs::remove_file(tmp.path().join("ent_links")).unwrap();
        let err = load_openea(tmp.path(), 1).unwrap_err();
        assert!(err.to_string().contains("ent_links"), "{err}");
        assert!(err.is_data_error());
    }

    #[test]
    fn malformed_line_reports_number() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "rel_triples_1", "a\tr1\tb\nb\tc\n");
        match load_openea(tmp.path(), 1).unwrap_err() {
            Error::Malformed { line, file, .. } => {
                assert_eq!(line, 2);
                assert!(file.ends_with("rel_triples_1"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_link_uri_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "721_5fold/1/test_links", "c\tnope\n");
        let err = load_openea(tmp.path(), 1).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn empty_train_links_allowed() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "721_5fold/1/train_links", "");
        let b = load_openea(tmp.path(), 1).unwrap();
        assert!(b.seeds.train.is_empty());
    }

    #[test]
    fn drops_self_loops_and_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "rel_triples_1", "a\tr1\tb\na\tr1\ta\na\tr1\tb\nb\tr2\tc\n");
        let b = load_openea(tmp.path(), 1).unwrap();
        assert_eq!(b.source.triples().len(), 2);
        assert_eq!(
            b.source_drops,
            DropCounts {
                self_loops: 1,
                duplicates: 1
            }
        );
    }

    #[test]
    fn link_only_entities_are_isolated() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "ent_links", "a\tx\nb\ty\nc\tz\nd\tw\n");
        let b = load_openea(tmp.path(), 1).unwrap();
        assert_eq!(b.source.entity_count(), 4);
        assert_eq!(b.source.degree(3), 0);
        assert_eq!(b.target.degree(3), 0);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        write(tmp.path(), "721_5fold/1/test_links", "a\tx\n");
        assert!(load_openea(tmp.path(), 1).is_err());
    }
}
