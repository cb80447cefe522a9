//! ImageScope-style annotation XML and patch membership.
//!
//! The accepted schema is the subset
//! `Annotations > Annotation(Id) > Regions > Region(Id) > Vertices > Vertex(X, Y)`.
//! Other elements and attributes are ignored on input. An optional `Text`
//! attribute on `Region` carries a class name, and an optional `SlideId`
//! attribute on the root carries the slide identity.
//!
//! A patch belongs to the annotation when its center point lies inside at
//! least one region polygon under the nonzero winding rule.

use std::collections::HashSet;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, PatchGrid, PatchRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRegion {
    pub region_id: String,
    pub vertices: Vec<(f64, f64)>,
    pub assigned_class: Option<PatchClass>,
}

impl AnnotationRegion {
    /// Nonzero-winding containment test against the implicitly closed polygon.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        winding_number(&self.vertices, (x, y)) != 0
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub regions: Vec<AnnotationRegion>,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>) -> Self {
        Self {
            slide_id: slide_id.into(),
            regions: Vec::new(),
        }
    }

    /// Clamp every vertex into `[0, width] × [0, height]`.
    pub fn clamp_to(&mut self, width: u32, height: u32) {
        let (w, h) = (f64::from(width), f64::from(height));
        for r in &mut self.regions {
            for v in &mut r.vertices {
                v.0 = v.0.clamp(0.0, w);
                v.1 = v.1.clamp(0.0, h);
            }
        }
    }
}

/// Parse output: the set plus one message per skipped region.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnnotations {
    pub set: AnnotationSet,
    pub warnings: Vec<String>,
}

/// Signed winding number of `poly` around `p`.
pub fn winding_number(poly: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let n = poly.len();
    let mut wn = 0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let side = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && side > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let pos = pos.min(text.len());
    let before = &text.as_bytes()[..pos];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let col = pos - before.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn parse_err(text: &str, pos: usize, message: impl Into<String>) -> Error {
    let (line, column) = line_col(text, pos);
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn attr(text: &str, pos: usize, e: &BytesStart<'_>, name: &[u8]) -> Result<Option<String>> {
    for a in e.attributes() {
        let a = a.map_err(|err| parse_err(text, pos, err.to_string()))?;
        if a.key.as_ref() == name {
            let v = a
                .unescape_value()
                .map_err(|err| parse_err(text, pos, err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn class_from_text(s: &str) -> Option<PatchClass> {
    match s.trim().to_ascii_lowercase().as_str() {
        "melanoma" => Some(PatchClass::Melanoma),
        "nevus" => Some(PatchClass::Nevus),
        "other" => Some(PatchClass::Other),
        _ => None,
    }
}

struct OpenRegion {
    layer_id: String,
    id: String,
    class: Option<PatchClass>,
    vertices: Vec<(f64, f64)>,
}

pub fn parse_annotation_xml(xml_text: &str) -> Result<ParsedAnnotations> {
    let mut reader = Reader::from_str(xml_text);
    reader.config_mut().trim_text(true);

    let mut stack: Vec<String> = Vec::new();
    let mut saw_root = false;
    let mut set = AnnotationSet::default();
    let mut warnings = Vec::new();
    let mut layer_id = String::new();
    let mut region: Option<OpenRegion> = None;
    let mut raw_regions: Vec<OpenRegion> = Vec::new();

    loop {
        let pos = reader.buffer_position() as usize;
        let event = reader
            .read_event()
            .map_err(|e| parse_err(xml_text, reader.error_position() as usize, e.to_string()))?;
        let (start, empty) = match &event {
            Event::Start(e) => (Some(e.clone()), false),
            Event::Empty(e) => (Some(e.clone()), true),
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                if name == "Region" {
                    if let Some(r) = region.take() {
                        raw_regions.push(r);
                    }
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        let Some(e) = start else { continue };
        let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        if stack.is_empty() {
            if saw_root {
                return Err(parse_err(xml_text, pos, "multiple root elements"));
            }
            if name != "Annotations" {
                return Err(parse_err(
                    xml_text,
                    pos,
                    format!("expected root <Annotations>, found <{name}>"),
                ));
            }
            saw_root = true;
            set.slide_id = attr(xml_text, pos, &e, b"SlideId")?.unwrap_or_default();
        }
        match name.as_str() {
            "Annotation" => {
                layer_id = attr(xml_text, pos, &e, b"Id")?.unwrap_or_default();
            }
            "Region" => {
                let id = attr(xml_text, pos, &e, b"Id")?
                    .ok_or_else(|| parse_err(xml_text, pos, "Region without Id"))?;
                let class = attr(xml_text, pos, &e, b"Text")?
                    .as_deref()
                    .and_then(class_from_text);
                let r = OpenRegion {
                    layer_id: layer_id.clone(),
                    id,
                    class,
                    vertices: Vec::new(),
                };
                if empty {
                    raw_regions.push(r);
                } else {
                    region = Some(r);
                }
            }
            "Vertex" => {
                let coord = |key: &[u8]| -> Result<f64> {
                    let v = attr(xml_text, pos, &e, key)?.ok_or_else(|| {
                        parse_err(
                            xml_text,
                            pos,
                            format!("Vertex missing {}", String::from_utf8_lossy(key)),
                        )
                    })?;
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|f| f.is_finite())
                        .ok_or_else(|| parse_err(xml_text, pos, format!("bad coordinate {v:?}")))
                };
                let (x, y) = (coord(b"X")?, coord(b"Y")?);
                match region.as_mut() {
                    Some(r) => r.vertices.push((x, y)),
                    None => return Err(parse_err(xml_text, pos, "Vertex outside Region")),
                }
            }
            _ => {}
        }
        if !empty {
            stack.push(name);
        }
    }

    if !stack.is_empty() {
        return Err(parse_err(
            xml_text,
            xml_text.len(),
            format!("unexpected end of document inside <{}>", stack.join("><")),
        ));
    }
    if !saw_root {
        return Err(parse_err(xml_text, xml_text.len(), "no <Annotations> root element"));
    }

    // Region ids repeat across layers in real exports; qualify duplicates.
    let mut seen = HashSet::new();
    for r in raw_regions {
        if r.vertices.len() < 3 {
            warnings.push(format!(
                "skipped region {} in annotation {}: {} vertices",
                r.id,
                r.layer_id,
                r.vertices.len()
            ));
            continue;
        }
        let mut id = r.id.clone();
        if !seen.insert(id.clone()) {
            id = format!("{}.{}", r.layer_id, r.id);
            let mut n = 1;
            while !seen.insert(id.clone()) {
                n += 1;
                id = format!("{}.{}#{n}", r.layer_id, r.id);
            }
        }
        set.regions.push(AnnotationRegion {
            region_id: id,
            vertices: r.vertices,
            assigned_class: r.class,
        });
    }
    Ok(ParsedAnnotations { set, warnings })
}

pub fn serialize_annotation_xml(set: &AnnotationSet) -> String {
    use quick_xml::escape::escape;
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!("<Annotations SlideId=\"{}\">\n", escape(set.slide_id.as_str())));
    if !set.regions.is_empty() {
        out.push_str("  <Annotation Id=\"1\">\n    <Regions>\n");
        for r in &set.regions {
            out.push_str(&format!("      <Region Id=\"{}\"", escape(r.region_id.as_str())));
            if let Some(c) = r.assigned_class {
                out.push_str(&format!(" Text=\"{c}\""));
            }
            out.push_str(">\n        <Vertices>\n");
            for (x, y) in &r.vertices {
                out.push_str(&format!("          <Vertex X=\"{x}\" Y=\"{y}\"/>\n"));
            }
            out.push_str("        </Vertices>\n      </Region>\n");
        }
        out.push_str("    </Regions>\n  </Annotation>\n");
    }
    out.push_str("</Annotations>\n");
    out
}

/// Per-patch membership flags in row-major grid order.
pub fn patch_membership(grid: &PatchGrid, set: &AnnotationSet) -> Result<Vec<bool>> {
    if grid.slide_id != set.slide_id {
        return Err(Error::Identity(format!(
            "grid is for slide {:?} but annotations are for {:?}",
            grid.slide_id, set.slide_id
        )));
    }
    let mut flags = vec![false; grid.len()];
    let ps = f64::from(grid.patch_size);
    for region in &set.regions {
        let (x0, y0, x1, y1) = region.bbox();
        // Only centers inside the bounding box can be inside the polygon.
        let gx0 = ((x0 / ps) - 0.5).floor().max(0.0) as u32;
        let gy0 = ((y0 / ps) - 0.5).floor().max(0.0) as u32;
        let gx1 = (((x1 / ps) - 0.5).ceil().max(0.0) as u32).min(grid.cols.saturating_sub(1));
        let gy1 = (((y1 / ps) - 0.5).ceil().max(0.0) as u32).min(grid.rows.saturating_sub(1));
        for gy in gy0..=gy1 {
            for gx in gx0..=gx1 {
                if !grid.contains(gx, gy) {
                    continue;
                }
                let i = grid.index(gx, gy);
                if flags[i] {
                    continue;
                }
                let (cx, cy) = grid.center(gx, gy);
                flags[i] = region.contains(cx, cy);
            }
        }
    }
    Ok(flags)
}

/// β = A_p / C_p over tissue patches.
pub fn annotated_ratio(patches: &[PatchRecord]) -> Result<f64> {
    let tissue = patches.iter().filter(|p| p.tissue).count();
    if tissue == 0 {
        return Err(Error::EmptySlide("annotated ratio over zero tissue patches".into()));
    }
    let annotated = patches.iter().filter(|p| p.tissue && p.in_annotation).count();
    Ok(annotated as f64 / tissue as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = r#"<?xml version="1.0"?>
<Annotations MicronsPerPixel="0.5">
  <Annotation Id="1" Name="">
    <Regions>
      <RegionAttributeHeaders/>
      <Region Id="7" Type="0" Text="">
        <Vertices>
          <Vertex X="10.5" Y="20" Z="0"/>
          <Vertex X="300" Y="20" Z="0"/>
          <Vertex X="150" Y="400.25" Z="0"/>
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
</Annotations>"#;

    fn grid(cols: u32, rows: u32) -> PatchGrid {
        PatchGrid {
            slide_id: "s".into(),
            patch_size: 256,
            cols,
            rows,
        }
    }

    #[test]
    fn parses_minimal_triangle() {
        let p = parse_annotation_xml(TRIANGLE).unwrap();
        assert!(p.warnings.is_empty());
        assert_eq!(p.set.regions.len(), 1);
        let r = &p.set.regions[0];
        assert_eq!(r.region_id, "7");
        assert_eq!(r.vertices, vec![(10.5, 20.0), (300.0, 20.0), (150.0, 400.25)]);
        assert_eq!(r.assigned_class, None);
    }

    #[test]
    fn empty_annotations() {
        let p = parse_annotation_xml("<Annotations></Annotations>").unwrap();
        assert!(p.set.regions.is_empty());
        let p = parse_annotation_xml("<Annotations/>").unwrap();
        assert!(p.set.regions.is_empty());
    }

    #[test]
    fn truncated_document_reports_position() {
        let cut = &TRIANGLE[..TRIANGLE.find("<Vertex X=\"300\"").unwrap() + 5];
        match parse_annotation_xml(cut) {
            Err(Error::Parse { line, .. }) => assert!(line >= 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_annotation_xml(""), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_annotation_xml("<Annotations><Annotation></Annotations>"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn short_regions_are_skipped_with_warning() {
        let xml = r#"<Annotations><Annotation Id="1"><Regions>
            <Region Id="1"><Vertices><Vertex X="0" Y="0"/><Vertex X="5" Y="5"/></Vertices></Region>
            <Region Id="2"><Vertices><Vertex X="0" Y="0"/><Vertex X="5" Y="0"/><Vertex X="5" Y="5"/></Vertices></Region>
        </Regions></Annotation></Annotations>"#;
        let p = parse_annotation_xml(xml).unwrap();
        assert_eq!(p.set.regions.len(), 1);
        assert_eq!(p.set.regions[0].region_id, "2");
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn duplicate_ids_across_layers_are_qualified() {
        let region = r#"<Region Id="1"><Vertices><Vertex X="0" Y="0"/><Vertex X="5" Y="0"/><Vertex X="5" Y="5"/></Vertices></Region>"#;
        let xml = format!(
            "<Annotations><Annotation Id=\"1\"><Regions>{region}</Regions></Annotation>\
             <Annotation Id=\"2\"><Regions>{region}</Regions></Annotation></Annotations>"
        );
        let p = parse_annotation_xml(&xml).unwrap();
        let ids: Vec<_> = p.set.regions.iter().map(|r| r.region_id.as_str()).collect();
        assert_eq!(ids, ["1", "2.1"]);
    }

    #[test]
    fn serialize_empty_and_roundtrip() {
        let empty = AnnotationSet::new("slide_a");
        let xml = serialize_annotation_xml(&empty);
        assert!(xml.contains("<Annotations SlideId=\"slide_a\">"));
        assert_eq!(parse_annotation_xml(&xml).unwrap().set, empty);

        let mut set = AnnotationSet::new("x&y");
        for id in ["1", "2"] {
            set.regions.push(AnnotationRegion {
                region_id: id.into(),
                vertices: vec![(0.0, 0.0), (512.0, 0.0), (512.0, 300.0)],
                assigned_class: Some(PatchClass::Nevus),
            });
        }
        let back = parse_annotation_xml(&serialize_annotation_xml(&set)).unwrap();
        assert_eq!(back.set, set);
    }

    #[test]
    fn full_cover_and_empty_membership() {
        let g = grid(3, 2);
        let mut set = AnnotationSet::new("s");
        assert!(patch_membership(&g, &set).unwrap().iter().all(|f| !f));
        set.regions.push(AnnotationRegion {
            region_id: "all".into(),
            vertices: vec![(0.0, 0.0), (768.0, 0.0), (768.0, 512.0), (0.0, 512.0)],
            assigned_class: None,
        });
        assert!(patch_membership(&g, &set).unwrap().iter().all(|&f| f));
        set.slide_id = "other".into();
        assert!(matches!(patch_membership(&g, &set), Err(Error::Identity(_))));
    }

    #[test]
    fn nonzero_rule_fills_doubly_wound_loop() {
        // Square traversed twice: even-odd would call the interior outside.
        let sq = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let twice: Vec<_> = sq.iter().chain(sq.iter()).copied().collect();
        assert_eq!(winding_number(&twice, (5.0, 5.0)), 2);
        assert_eq!(winding_number(&sq, (15.0, 5.0)), 0);
    }

    #[test]
    fn ratio_counts_tissue_only() {
        let mut recs = Vec::new();
        for i in 0..250u32 {
            let mut r = PatchRecord::new(i % 25, i / 25, true);
            r.in_annotation = i < 50;
            recs.push(r);
        }
        let mut bg = PatchRecord::new(0, 99, false);
        bg.in_annotation = true;
        recs.push(bg);
        assert_eq!(annotated_ratio(&recs).unwrap(), 0.2);
        assert!(matches!(
            annotated_ratio(&[PatchRecord::new(0, 0, false)]),
            Err(Error::EmptySlide(_))
        ));
    }
}
