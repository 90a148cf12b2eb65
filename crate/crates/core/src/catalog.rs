//! Few-shot snippet catalog.
//!
//! The catalog file is plain UTF-8 text made of sections:
//!
//! ```text
//! [tag: contour]
//! # title: Isosurface of a point array
//! # notes: optional free text
//! contour = Contour(Input=reader)
//! contour.ContourBy = ['POINTS', 'var0']
//! ```
//!
//! A section's body runs until the next header. Several sections may share a
//! tag. Lines before the first header may only be blank or `#` comments.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The default catalog shipped with the crate.
pub const DEFAULT_CATALOG: &str = include_str!("../fixtures/snippets.catalog");

/// Operations a visualization request can ask for, in canonical pipeline
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationTag {
    Reader,
    Slice,
    Clip,
    Contour,
    Delaunay3d,
    StreamTracer,
    Tube,
    Glyph,
    VolumeRender,
    ColorBy,
    CameraView,
    Layout,
    Screenshot,
}

impl OperationTag {
    pub const ALL: [OperationTag; 13] = [
        OperationTag::Reader,
        OperationTag::Slice,
        OperationTag::Clip,
        OperationTag::Contour,
        OperationTag::Delaunay3d,
        OperationTag::StreamTracer,
        OperationTag::Tube,
        OperationTag::Glyph,
        OperationTag::VolumeRender,
        OperationTag::ColorBy,
        OperationTag::CameraView,
        OperationTag::Layout,
        OperationTag::Screenshot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperationTag::Reader => "reader",
            OperationTag::Slice => "slice",
            OperationTag::Clip => "clip",
            OperationTag::Contour => "contour",
            OperationTag::Delaunay3d => "delaunay3d",
            OperationTag::StreamTracer => "stream_tracer",
            OperationTag::Tube => "tube",
            OperationTag::Glyph => "glyph",
            OperationTag::VolumeRender => "volume_render",
            OperationTag::ColorBy => "color_by",
            OperationTag::CameraView => "camera_view",
            OperationTag::Layout => "layout",
            OperationTag::Screenshot => "screenshot",
        }
    }
}

impl fmt::Display for OperationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown operation tag `{0}`")]
pub struct UnknownTag(pub String);

impl FromStr for OperationTag {
    type Err = UnknownTag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperationTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub tag: OperationTag,
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown tag `{tag}`")]
    UnknownTag { line: usize, tag: String },
    #[error("line {line}: snippet `{title}` has no call-like token")]
    NoCall { line: usize, title: String },
    #[error("catalog does not cover tags: {}", missing.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(", "))]
    MissingTags { missing: Vec<OperationTag> },
    #[error("reading catalog: {0}")]
    Io(#[from] std::io::Error),
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\[tag:\s*([^\]]*?)\s*\]\s*$").unwrap())
}

fn call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z_][A-Za-z0-9_]*\(").unwrap())
}

/// An immutable set of snippets covering every [`OperationTag`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    snippets: Vec<Snippet>,
}

struct Section {
    header_line: usize,
    tag: OperationTag,
    title: Option<String>,
    notes: Option<String>,
    body: Vec<String>,
    in_meta: bool,
}

impl Section {
    fn finish(self) -> Result<Snippet, CatalogError> {
        let mut body = self.body;
        while body.last().is_some_and(|l| l.trim().is_empty()) {
            body.pop();
        }
        let start = body.iter().take_while(|l| l.trim().is_empty()).count();
        let body = body[start..].join("\n");
        let title = self.title.unwrap_or_else(|| self.tag.as_str().to_string());
        if !call_re().is_match(&body) {
            return Err(CatalogError::NoCall {
                line: self.header_line,
                title,
            });
        }
        Ok(Snippet {
            tag: self.tag,
            title,
            body,
            notes: self.notes,
        })
    }
}

impl Catalog {
    /// Parses catalog text and checks that every tag has at least one snippet.
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut snippets = Vec::new();
        let mut current: Option<Section> = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if let Some(caps) = header_re().captures(line) {
                if let Some(section) = current.take() {
                    snippets.push(section.finish()?);
                }
                let name = &caps[1];
                let tag = name.parse().map_err(|_| CatalogError::UnknownTag {
                    line: line_no,
                    tag: name.to_string(),
                })?;
                current = Some(Section {
                    header_line: line_no,
                    tag,
                    title: None,
                    notes: None,
                    body: Vec::new(),
                    in_meta: true,
                });
                continue;
            }
            match current.as_mut() {
                None => {
                    let t = line.trim();
                    if !(t.is_empty() || t.starts_with('#')) {
                        return Err(CatalogError::Parse {
                            line: line_no,
                            message: "text before the first `[tag: ...]` header".into(),
                        });
                    }
                }
                Some(section) => {
                    if section.in_meta {
                        if let Some(title) = line.strip_prefix("# title:") {
                            section.title = Some(title.trim().to_string());
                            continue;
                        }
                        if let Some(notes) = line.strip_prefix("# notes:") {
                            section.notes = Some(notes.trim().to_string());
                            continue;
                        }
                        section.in_meta = false;
                    }
                    section.body.push(line.to_string());
                }
            }
        }
        if let Some(section) = current {
            snippets.push(section.finish()?);
        }
        Self::from_snippets(snippets)
    }

    pub fn from_snippets(snippets: Vec<Snippet>) -> Result<Self, CatalogError> {
        let covered: BTreeSet<_> = snippets.iter().map(|s| s.tag).collect();
        let missing: Vec<_> = OperationTag::ALL.into_iter().filter(|t| !covered.contains(t)).collect();
        if !missing.is_empty() {
            return Err(CatalogError::MissingTags { missing });
        }
        Ok(Self { snippets })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("shipped catalog is valid")
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    /// Serializes back to the section format accepted by [`Catalog::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.snippets {
            out.push_str(&format!("[tag: {}]\n# title: {}\n", s.tag, s.title));
            if let Some(notes) = &s.notes {
                out.push_str(&format!("# notes: {notes}\n"));
            }
            out.push_str(&s.body);
            out.push_str("\n\n");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CatalogError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Snippets for exactly `tags`, grouped in canonical pipeline order. Within
    /// a tag, file order is kept.
    pub fn select(&self, tags: &BTreeSet<OperationTag>) -> Vec<Snippet> {
        // BTreeSet iteration follows the enum declaration, which is canonical.
        tags.iter()
            .flat_map(|tag| self.snippets.iter().filter(move |s| s.tag == *tag))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn builtin_covers_all_tags_from_file() {
        // Independent scan of the raw file for header lines.
        let tags: BTreeSet<String> = DEFAULT_CATALOG
            .lines()
            .filter_map(|l| l.strip_prefix("[tag: "))
            .map(|l| l.trim_end_matches(']').to_string())
            .collect();
        assert_eq!(tags.len(), 13);
        for tag in OperationTag::ALL {
            assert!(tags.contains(tag.as_str()), "{tag}");
        }
        let catalog = Catalog::builtin();
        assert!(catalog.snippets().len() >= 13);
    }

    #[test]
    fn empty_file_fails_validation() {
        match Catalog::parse("") {
            Err(CatalogError::MissingTags { missing }) => assert_eq!(missing.len(), 13),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn unknown_tag_named_in_error() {
        let text = "# header comment\n[tag: reader]\nr = OpenDataFile('a.vtk')\n[tag: isosurfaces]\nContour()\n";
        match Catalog::parse(text) {
            Err(CatalogError::UnknownTag { line, tag }) => {
                assert_eq!(line, 4);
                assert_eq!(tag, "isosurfaces");
            }
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn stray_text_reports_line() {
        match Catalog::parse("\nhello\n[tag: reader]\nx()\n") {
            Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 2),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn body_without_call_rejected() {
        let mut text = Catalog::builtin().to_text();
        text.push_str("[tag: tube]\n# title: broken\ntube.Radius = 0.1\n");
        assert!(matches!(Catalog::parse(&text), Err(CatalogError::NoCall { .. })));
    }

    #[test]
    fn missing_tags_listed() {
        let text = "[tag: reader]\nr = OpenDataFile('a.vtk')\n";
        let err = Catalog::parse(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("screenshot"));
        assert!(!msg.contains("reader,"));
    }

    #[test]
    fn select_in_canonical_order() {
        let catalog = Catalog::builtin();
        let tags: BTreeSet<_> = [OperationTag::Screenshot, OperationTag::Contour, OperationTag::Reader]
            .into_iter()
            .collect();
        let got: Vec<_> = catalog.select(&tags).iter().map(|s| s.tag).collect();
        assert_eq!(
            got,
            [OperationTag::Reader, OperationTag::Contour, OperationTag::Screenshot]
        );
        assert!(catalog.select(&BTreeSet::new()).is_empty());

        let all: BTreeSet<_> = OperationTag::ALL.into_iter().collect();
        let every = catalog.select(&all);
        assert_eq!(every.len(), catalog.snippets().len());
        assert_eq!(every.first().unwrap().tag, OperationTag::Reader);
        assert_eq!(every.last().unwrap().tag, OperationTag::Screenshot);
    }

    #[test]
    fn builtin_round_trips() {
        let catalog = Catalog::builtin();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.catalog");
        catalog.save(&path).unwrap();
        assert_eq!(Catalog::load(&path).unwrap(), catalog);
    }

    fn canonical_position(tag: OperationTag) -> usize {
        OperationTag::ALL.iter().position(|t| *t == tag).unwrap()
    }

    proptest! {
        #[test]
        fn select_is_canonical_subsequence(mask in 0u16..(1 << 13)) {
            let tags: BTreeSet<_> = OperationTag::ALL
                .into_iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, t)| t)
                .collect();
            let picked = Catalog::builtin().select(&tags);
            let positions: Vec<_> = picked.iter().map(|s| canonical_position(s.tag)).collect();
            prop_assert!(positions.windows(2).all(|w| w[0] <= w[1]));
            let covered: BTreeSet<_> = picked.iter().map(|s| s.tag).collect();
            prop_assert_eq!(covered, tags);
        }

        #[test]
        fn save_load_identity(
            bodies in proptest::collection::vec("[a-z]{1,6}\\([a-z0-9, ]{0,8}\\)( # c)?", 13),
            titles in proptest::collection::vec("[A-Za-z][A-Za-z ]{0,10}[a-z]", 13),
        ) {
            let snippets: Vec<_> = OperationTag::ALL
                .into_iter()
                .zip(bodies.into_iter().zip(titles))
                .map(|(tag, (body, title))| Snippet { tag, title, body, notes: None })
                .collect();
            let catalog = Catalog::from_snippets(snippets).unwrap();
            prop_assert_eq!(Catalog::parse(&catalog.to_text()).unwrap(), catalog);
        }
    }
}
