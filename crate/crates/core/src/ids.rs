//! Ideographic Description Sequences.
//!
//! An IDS writes a character in prefix notation: a description operator
//! (U+2FF0..U+2FFB) followed by its two or three operands, each of which is a
//! component character or another sequence. The parsed tree is the structural
//! blueprint that synthesis uses to keep components in place, so this module
//! also maps a tree onto nested boxes of a glyph canvas.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Rect;
use crate::seed;

pub const FIRST_OPERATOR: u32 = 0x2FF0;
pub const LAST_OPERATOR: u32 = 0x2FFB;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdsError {
    /// The input ended while operands were still expected.
    #[error("truncated sequence: expected {missing} more operand(s) at offset {offset}")]
    TruncatedSequence { offset: usize, missing: usize },
    /// A complete tree was read but characters remain.
    #[error("trailing input at offset {offset}")]
    TrailingInput { offset: usize },
    /// A description character newer than U+2FFB.
    #[error("unsupported description operator U+{codepoint:04X} at offset {offset}")]
    UnknownOperator { offset: usize, codepoint: u32 },
    #[error("degenerate layout box for leaf {leaf_index}: {rect:?}")]
    DegenerateBox { leaf_index: usize, rect: Rect },
    #[error("invalid layout parameters: {0}")]
    InvalidParams(String),
    #[error("io error reading IDS table: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Horizontal,
    Vertical,
    Horizontal3,
    Vertical3,
    SurroundFull,
    SurroundAbove,
    SurroundBelow,
    SurroundLeftOpenRight,
    SurroundUpperLeft,
    SurroundUpperRight,
    SurroundLowerLeft,
    Overlaid,
}

/// One of the twelve ideographic description characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdsOperator(char);

impl IdsOperator {
    pub fn from_char(c: char) -> Option<Self> {
        is_operator(c).then_some(Self(c))
    }

    pub fn all() -> impl Iterator<Item = IdsOperator> {
        (FIRST_OPERATOR..=LAST_OPERATOR).map(|cp| IdsOperator(char::from_u32(cp).unwrap()))
    }

    pub fn as_char(self) -> char {
        self.0
    }

    pub fn codepoint(self) -> u32 {
        self.0 as u32
    }

    pub fn arity(self) -> usize {
        match self.0 {
            '\u{2FF2}' | '\u{2FF3}' => 3,
            _ => 2,
        }
    }

    pub fn layout_kind(self) -> LayoutKind {
        match self.0 {
            '\u{2FF0}' => LayoutKind::Horizontal,
            '\u{2FF1}' => LayoutKind::Vertical,
            '\u{2FF2}' => LayoutKind::Horizontal3,
            '\u{2FF3}' => LayoutKind::Vertical3,
            '\u{2FF4}' => LayoutKind::SurroundFull,
            '\u{2FF5}' => LayoutKind::SurroundAbove,
            '\u{2FF6}' => LayoutKind::SurroundBelow,
            '\u{2FF7}' => LayoutKind::SurroundLeftOpenRight,
            '\u{2FF8}' => LayoutKind::SurroundUpperLeft,
            '\u{2FF9}' => LayoutKind::SurroundUpperRight,
            '\u{2FFA}' => LayoutKind::SurroundLowerLeft,
            '\u{2FFB}' => LayoutKind::Overlaid,
            _ => unreachable!("IdsOperator holds only U+2FF0..U+2FFB"),
        }
    }
}

pub fn is_operator(c: char) -> bool {
    (FIRST_OPERATOR..=LAST_OPERATOR).contains(&(c as u32))
}

/// Description characters added to Unicode after the original twelve.
fn is_later_operator(c: char) -> bool {
    matches!(c as u32, 0x2FFC..=0x2FFF | 0x31EF)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IdsTree {
    Leaf(char),
    Node {
        op: IdsOperator,
        children: Vec<IdsTree>,
    },
}

impl IdsTree {
    fn walk(&self, mut visit: impl FnMut(&IdsTree, usize)) {
        let mut stack = vec![(self, 0usize)];
        while let Some((t, depth)) = stack.pop() {
            visit(t, depth);
            if let IdsTree::Node { children, .. } = t {
                stack.extend(children.iter().rev().map(|c| (c, depth + 1)));
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.walk(|t, _| n += t.is_leaf() as usize);
        n
    }

    /// Leaf components in preorder.
    pub fn leaves(&self) -> Vec<char> {
        let mut out = Vec::new();
        self.walk(|t, _| {
            if let IdsTree::Leaf(c) = t {
                out.push(*c);
            }
        });
        out
    }

    pub fn depth(&self) -> usize {
        let mut d = 0;
        self.walk(|_, depth| d = d.max(depth));
        d
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, IdsTree::Leaf(_))
    }
}

impl Drop for IdsTree {
    fn drop(&mut self) {
        if let IdsTree::Node { children, .. } = self {
            let mut pending = std::mem::take(children);
            while let Some(mut t) = pending.pop() {
                if let IdsTree::Node { children, .. } = &mut t {
                    pending.append(children);
                }
            }
        }
    }
}

impl fmt::Display for IdsTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

/// Parse a complete sequence. A lone non-operator character is a bare leaf.
pub fn parse(text: &str) -> Result<IdsTree, IdsError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pos = 0;
    let tree = parse_node(&chars, &mut pos, text.len())?;
    if pos < chars.len() {
        return Err(IdsError::TrailingInput { offset: chars[pos].0 });
    }
    Ok(tree)
}

fn parse_node(chars: &[(usize, char)], pos: &mut usize, end: usize) -> Result<IdsTree, IdsError> {
    // Explicit stack instead of recursion: fuzzed inputs may nest arbitrarily deep.
    struct Frame {
        op: IdsOperator,
        children: Vec<IdsTree>,
    }
    let mut stack: Vec<Frame> = Vec::new();
    loop {
        let Some(&(offset, c)) = chars.get(*pos) else {
            let missing = stack
                .iter()
                .map(|f| f.op.arity() - f.children.len())
                .sum::<usize>()
                .max(1);
            return Err(IdsError::TruncatedSequence { offset: end, missing });
        };
        *pos += 1;
        let mut done = if let Some(op) = IdsOperator::from_char(c) {
            stack.push(Frame {
                op,
                children: Vec::with_capacity(op.arity()),
            });
            continue;
        } else if is_later_operator(c) {
            return Err(IdsError::UnknownOperator {
                offset,
                codepoint: c as u32,
            });
        } else {
            IdsTree::Leaf(c)
        };
        loop {
            match stack.last_mut() {
                None => return Ok(done),
                Some(frame) => {
                    frame.children.push(done);
                    if frame.children.len() < frame.op.arity() {
                        break;
                    }
                    let frame = stack.pop().unwrap();
                    done = IdsTree::Node {
                        op: frame.op,
                        children: frame.children,
                    };
                }
            }
        }
    }
}

/// Preorder emission; inverse of [`parse`].
pub fn serialize(tree: &IdsTree) -> String {
    let mut out = String::new();
    let mut stack = vec![tree];
    while let Some(t) = stack.pop() {
        match t {
            IdsTree::Leaf(c) => out.push(*c),
            IdsTree::Node { op, children } => {
                out.push(op.as_char());
                stack.extend(children.iter().rev());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    /// Position of the cut for two-way splits, as a fraction of the extent.
    pub split_ratio: f64,
    /// Inner inset of surround operators, per closed side.
    pub inset_fraction: f64,
    /// Maximum deviation of three-way splits from equal thirds.
    pub three_way_jitter: f64,
    pub jitter_seed: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            split_ratio: 0.5,
            inset_fraction: 0.25,
            three_way_jitter: 0.06,
            jitter_seed: 0,
        }
    }
}

impl LayoutParams {
    pub fn without_jitter() -> Self {
        Self {
            three_way_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), IdsError> {
        if !(0.3..=0.7).contains(&self.split_ratio) {
            return Err(IdsError::InvalidParams(format!(
                "split_ratio {} outside [0.3, 0.7]",
                self.split_ratio
            )));
        }
        if !(0.1..=0.4).contains(&self.inset_fraction) {
            return Err(IdsError::InvalidParams(format!(
                "inset_fraction {} outside [0.1, 0.4]",
                self.inset_fraction
            )));
        }
        if !(0.0..=1.0 / 6.0).contains(&self.three_way_jitter) {
            return Err(IdsError::InvalidParams(format!(
                "three_way_jitter {} outside [0, 1/6]",
                self.three_way_jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRegion {
    pub leaf_index: usize,
    pub rect: Rect,
}

/// Subdivide `canvas` recursively, one region per leaf in preorder.
pub fn layout(tree: &IdsTree, canvas: Rect, params: &LayoutParams) -> Result<Vec<LayoutRegion>, IdsError> {
    params.validate()?;
    if canvas.is_empty() {
        return Err(IdsError::DegenerateBox { leaf_index: 0, rect: canvas });
    }
    // Deeper trees cannot fit any pixel grid; refuse before recursing.
    if tree.depth() > 48 {
        return Err(IdsError::DegenerateBox {
            leaf_index: 0,
            rect: Rect::new(canvas.x0, canvas.y0, canvas.x0, canvas.y0),
        });
    }
    let mut out = Vec::with_capacity(tree.leaf_count());
    let mut node_index = 0usize;
    place(tree, canvas, params, &mut node_index, &mut out);
    if let Some(bad) = out.iter().find(|r| r.rect.is_empty()) {
        return Err(IdsError::DegenerateBox {
            leaf_index: bad.leaf_index,
            rect: bad.rect,
        });
    }
    Ok(out)
}

fn place(tree: &IdsTree, rect: Rect, params: &LayoutParams, node_index: &mut usize, out: &mut Vec<LayoutRegion>) {
    let this_node = *node_index;
    *node_index += 1;
    match tree {
        IdsTree::Leaf(_) => out.push(LayoutRegion {
            leaf_index: out.len(),
            rect,
        }),
        IdsTree::Node { op, children } => {
            let boxes = split_box(op.layout_kind(), rect, params, this_node);
            for (child, b) in children.iter().zip(boxes) {
                place(child, b, params, node_index, out);
            }
        }
    }
}

fn cut(start: i32, len: i32, frac: f64) -> i32 {
    start + (len as f64 * frac).round() as i32
}

fn split_box(kind: LayoutKind, r: Rect, p: &LayoutParams, node: usize) -> Vec<Rect> {
    let (w, h) = (r.width(), r.height());
    let inset_x = (w as f64 * p.inset_fraction).round() as i32;
    let inset_y = (h as f64 * p.inset_fraction).round() as i32;
    let thirds = || {
        let j = p.three_way_jitter * seed::signed_unit_f64(seed::hash64(&[p.jitter_seed, node as u64]));
        // Middle share grows by 2j while both outer shares shrink by j.
        (1.0 / 3.0 - j, 2.0 / 3.0 + j)
    };
    match kind {
        LayoutKind::Horizontal => {
            let x = cut(r.x0, w, p.split_ratio);
            vec![Rect::new(r.x0, r.y0, x, r.y1), Rect::new(x, r.y0, r.x1, r.y1)]
        }
        LayoutKind::Vertical => {
            let y = cut(r.y0, h, p.split_ratio);
            vec![Rect::new(r.x0, r.y0, r.x1, y), Rect::new(r.x0, y, r.x1, r.y1)]
        }
        LayoutKind::Horizontal3 => {
            let (a, b) = thirds();
            let (xa, xb) = (cut(r.x0, w, a), cut(r.x0, w, b));
            vec![
                Rect::new(r.x0, r.y0, xa, r.y1),
                Rect::new(xa, r.y0, xb, r.y1),
                Rect::new(xb, r.y0, r.x1, r.y1),
            ]
        }
        LayoutKind::Vertical3 => {
            let (a, b) = thirds();
            let (ya, yb) = (cut(r.y0, h, a), cut(r.y0, h, b));
            vec![
                Rect::new(r.x0, r.y0, r.x1, ya),
                Rect::new(r.x0, ya, r.x1, yb),
                Rect::new(r.x0, yb, r.x1, r.y1),
            ]
        }
        LayoutKind::Overlaid => vec![r, r],
        _ => {
            // (left, top, right, bottom) closed sides of the enclosure.
            let (l, t, rt, b) = match kind {
                LayoutKind::SurroundFull => (true, true, true, true),
                LayoutKind::SurroundAbove => (true, true, true, false),
                LayoutKind::SurroundBelow => (true, false, true, true),
                LayoutKind::SurroundLeftOpenRight => (true, true, false, true),
                LayoutKind::SurroundUpperLeft => (true, true, false, false),
                LayoutKind::SurroundUpperRight => (false, true, true, false),
                LayoutKind::SurroundLowerLeft => (true, false, false, true),
                _ => unreachable!(),
            };
            let inner = Rect::new(
                r.x0 + if l { inset_x } else { 0 },
                r.y0 + if t { inset_y } else { 0 },
                r.x1 - if rt { inset_x } else { 0 },
                r.y1 - if b { inset_y } else { 0 },
            );
            vec![r, inner]
        }
    }
}

/// A character → IDS lookup loaded from a tab-separated table.
///
/// Format: `<char>\t<ids>[\t<gloss>]`, `#` comments. When a character is
/// listed more than once, the first decomposition wins.
#[derive(Debug, Clone, Default)]
pub struct IdsTable {
    entries: BTreeMap<char, IdsRecord>,
    order: Vec<char>,
}

#[derive(Debug, Clone)]
pub struct IdsRecord {
    pub label: char,
    pub ids: String,
    pub tree: IdsTree,
    pub gloss: Option<String>,
}

impl IdsTable {
    pub fn parse_str(text: &str) -> Self {
        let mut table = IdsTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(label), Some(ids)) = (fields.next(), fields.next()) else {
                log::warn!("IDS table line {}: expected two tab-separated fields", lineno + 1);
                continue;
            };
            let mut label_chars = label.chars();
            let (Some(label), None) = (label_chars.next(), label_chars.next()) else {
                log::warn!("IDS table line {}: label must be one character", lineno + 1);
                continue;
            };
            if ids.contains(['(', ')', '{', '}', '[', ']']) {
                log::warn!("IDS table line {}: nested component notation skipped", lineno + 1);
                continue;
            }
            if table.entries.contains_key(&label) {
                continue;
            }
            let tree = match parse(ids) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("IDS table line {}: {e}", lineno + 1);
                    continue;
                }
            };
            let gloss = fields.next().map(str::trim).filter(|g| !g.is_empty()).map(str::to_owned);
            table.order.push(label);
            table.entries.insert(
                label,
                IdsRecord {
                    label,
                    ids: ids.to_owned(),
                    tree,
                    gloss,
                },
            );
        }
        table
    }

    pub fn load(path: &Path) -> Result<Self, IdsError> {
        let text = std::fs::read_to_string(path).map_err(|e| IdsError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::parse_str(&text))
    }

    pub fn get(&self, label: char) -> Option<&IdsRecord> {
        self.entries.get(&label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records in file order.
    pub fn records(&self) -> impl Iterator<Item = &IdsRecord> {
        self.order.iter().map(|c| &self.entries[c])
    }

    /// Labels sorted by codepoint.
    pub fn labels(&self) -> Vec<char> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(c: char) -> IdsTree {
        IdsTree::Leaf(c)
    }

    fn node(op: char, children: Vec<IdsTree>) -> IdsTree {
        IdsTree::Node {
            op: IdsOperator::from_char(op).unwrap(),
            children,
        }
    }

    #[test]
    fn operator_table() {
        let ops: Vec<_> = IdsOperator::all().collect();
        assert_eq!(ops.len(), 12);
        for op in ops {
            let expected = if matches!(op.as_char(), '⿲' | '⿳') { 3 } else { 2 };
            assert_eq!(op.arity(), expected, "{}", op.as_char());
        }
        assert_eq!(IdsOperator::from_char('⿻').unwrap().layout_kind(), LayoutKind::Overlaid);
        assert!(IdsOperator::from_char('木').is_none());
    }

    #[test]
    fn parses_binary_and_ternary() {
        assert_eq!(parse("⿰木木").unwrap(), node('⿰', vec![leaf('木'), leaf('木')]));
        assert_eq!(
            parse("⿳亠口口").unwrap(),
            node('⿳', vec![leaf('亠'), leaf('口'), leaf('口')])
        );
        assert_eq!(parse("木").unwrap(), leaf('木'));
    }

    #[test]
    fn parses_nested() {
        let t = parse("⿱木⿰木木").unwrap();
        assert_eq!(t, node('⿱', vec![leaf('木'), node('⿰', vec![leaf('木'), leaf('木')])]));
        assert_eq!(t.leaf_count(), 3);
        assert_eq!(t.depth(), 2);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("⿰木"), Err(IdsError::TruncatedSequence { .. })));
        assert!(matches!(parse(""), Err(IdsError::TruncatedSequence { .. })));
        assert!(matches!(parse("⿳亠口"), Err(IdsError::TruncatedSequence { .. })));
        assert!(matches!(parse("木木"), Err(IdsError::TrailingInput { offset: 3 })));
        assert!(matches!(parse("⿰木木口"), Err(IdsError::TrailingInput { .. })));
        assert!(matches!(
            parse("\u{2FFC}木木"),
            Err(IdsError::UnknownOperator { codepoint: 0x2FFC, .. })
        ));
    }

    #[test]
    fn serializes_preorder() {
        assert_eq!(serialize(&leaf('木')), "木");
        assert_eq!(serialize(&node('⿱', vec![leaf('日'), leaf('月')])), "⿱日月");
        for s in ["⿱木⿰木木", "⿴囗⿱一口", "⿲彳⿱山王攵"] {
            assert_eq!(serialize(&parse(s).unwrap()), s);
        }
    }

    #[test]
    fn deep_nesting_does_not_overflow() {
        let s: String = std::iter::repeat('⿰').take(100_000).chain(std::iter::repeat('木').take(100_001)).collect();
        let t = parse(&s).unwrap();
        assert_eq!(t.leaf_count(), 100_001);
        assert_eq!(serialize(&t), s);
        assert!(layout(&t, Rect::square(96), &LayoutParams::default()).is_err());
    }

    #[test]
    fn layout_horizontal_half() {
        let t = parse("⿰木木").unwrap();
        let r = layout(&t, Rect::square(96), &LayoutParams::without_jitter()).unwrap();
        assert_eq!(r[0].rect, Rect::new(0, 0, 48, 96));
        assert_eq!(r[1].rect, Rect::new(48, 0, 96, 96));
    }

    #[test]
    fn layout_full_surround() {
        let t = parse("⿴囗口").unwrap();
        let r = layout(&t, Rect::square(96), &LayoutParams::without_jitter()).unwrap();
        assert_eq!(r[0].rect, Rect::new(0, 0, 96, 96));
        assert_eq!(r[1].rect, Rect::new(24, 24, 72, 72));
    }

    #[test]
    fn layout_three_bands() {
        let t = parse("⿳亠口口").unwrap();
        let r = layout(&t, Rect::square(96), &LayoutParams::without_jitter()).unwrap();
        let rects: Vec<_> = r.iter().map(|x| x.rect).collect();
        assert_eq!(
            rects,
            vec![
                Rect::new(0, 0, 96, 32),
                Rect::new(0, 32, 96, 64),
                Rect::new(0, 64, 96, 96)
            ]
        );
    }

    #[test]
    fn layout_partial_surrounds_inset_closed_sides() {
        let p = LayoutParams::without_jitter();
        let c = Rect::square(96);
        let inner = |s: &str| layout(&parse(s).unwrap(), c, &p).unwrap()[1].rect;
        assert_eq!(inner("⿵门口"), Rect::new(24, 24, 72, 96));
        assert_eq!(inner("⿶凵乂"), Rect::new(24, 0, 72, 72));
        assert_eq!(inner("⿷匚矢"), Rect::new(24, 24, 96, 72));
        assert_eq!(inner("⿸广木"), Rect::new(24, 24, 96, 96));
        assert_eq!(inner("⿹勹口"), Rect::new(0, 24, 72, 96));
        assert_eq!(inner("⿺辶井"), Rect::new(24, 0, 96, 72));
        assert_eq!(inner("⿻木一"), c);
    }

    #[test]
    fn three_way_jitter_is_symmetric_and_seeded() {
        let t = parse("⿲彳亍亍").unwrap();
        let p = LayoutParams {
            jitter_seed: 42,
            ..LayoutParams::default()
        };
        let a = layout(&t, Rect::square(96), &p).unwrap();
        let b = layout(&t, Rect::square(96), &p).unwrap();
        assert_eq!(a, b);
        let left = a[0].rect.width();
        let right = a[2].rect.width();
        assert!((left - right).abs() <= 1, "outer shares equal: {left} vs {right}");
        assert!((left - 32).abs() <= 6);
    }

    #[test]
    fn degenerate_box_on_tiny_canvas() {
        let t = parse("⿰⿰⿰木木木木").unwrap();
        assert!(matches!(
            layout(&t, Rect::square(4), &LayoutParams::without_jitter()),
            Err(IdsError::DegenerateBox { .. })
        ));
        assert!(layout(&t, Rect::square(96), &LayoutParams::without_jitter()).is_ok());
    }

    #[test]
    fn rejects_out_of_range_params() {
        let t = parse("⿰木木").unwrap();
        let p = LayoutParams {
            split_ratio: 0.8,
            ..LayoutParams::default()
        };
        assert!(matches!(layout(&t, Rect::square(96), &p), Err(IdsError::InvalidParams(_))));
    }

    #[test]
    fn table_keeps_first_and_skips_nested() {
        let t = IdsTable::parse_str("# comment\n林\t⿰木木\tgrove\n林\t⿰木林\n好\t⿰女(子)\n木\t木\n");
        assert_eq!(t.len(), 2);
        assert_eq!(t.get('林').unwrap().ids, "⿰木木");
        assert_eq!(t.get('林').unwrap().gloss.as_deref(), Some("grove"));
        assert!(t.get('好').is_none());
        assert_eq!(t.labels(), vec!['木', '林']);
    }
}
