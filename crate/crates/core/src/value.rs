//! Uniform word-sized values and the object header layout.
//!
//! A [`Value`] is one 64-bit word. Scalars carry their payload shifted left by
//! one with the low bit set; heap references are word-aligned addresses and so
//! always have the low bit clear. Every object starts with a [`Header`] word
//! packing, from the least significant bit upwards: 2 color bits, an 8-bit
//! tag, and the payload size in words.

use std::fmt;

use thiserror::Error;

/// Largest scalar representable in a tagged word.
pub const MAX_SCALAR: i64 = (1 << 62) - 1;
/// Smallest scalar representable in a tagged word.
pub const MIN_SCALAR: i64 = -(1 << 62);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("scalar {0} does not fit in 63 bits")]
pub struct RangeError(pub i64);

/// One machine word: a tagged scalar or a heap reference.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct Value(u64);

impl Value {
    /// Scalar zero, the initial contents of freshly allocated fields.
    pub const UNIT: Value = Value(1);

    /// The erased-slot sentinel used by ephemerons. It is reference-shaped
    /// (low bit clear) but never names a heap object.
    pub const EMPTY: Value = Value(0);

    #[inline]
    pub const fn from_raw(raw: u64) -> Value {
        Value(raw)
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn encode_scalar(n: i64) -> Result<Value, RangeError> {
        if !(MIN_SCALAR..=MAX_SCALAR).contains(&n) {
            return Err(RangeError(n));
        }
        Ok(Value(((n << 1) | 1) as u64))
    }

    /// Encodes a scalar known to be in range.
    ///
    /// Panics if `n` does not fit in 63 bits.
    #[inline]
    pub fn int(n: i64) -> Value {
        Value::encode_scalar(n).expect("scalar out of range")
    }

    #[inline]
    pub fn decode_scalar(self) -> Option<i64> {
        if self.is_scalar() {
            Some((self.0 as i64) >> 1)
        } else {
            None
        }
    }

    #[inline]
    pub const fn is_scalar(self) -> bool {
        self.0 & 1 == 1
    }

    #[inline]
    pub const fn is_reference(self) -> bool {
        self.0 & 1 == 0
    }

    /// A reference that names an object (excludes [`Value::EMPTY`]).
    #[inline]
    pub const fn is_pointer(self) -> bool {
        self.0 & 1 == 0 && self.0 != 0
    }

    #[inline]
    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub const fn from_addr(addr: usize) -> Value {
        Value(addr as u64)
    }

    #[inline]
    pub const fn addr(self) -> usize {
        self.0 as usize
    }

    /// Address of payload field `i` of the object this value references.
    #[inline]
    pub const fn field_addr(self, i: usize) -> usize {
        self.0 as usize + 8 * (i + 1)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = self.decode_scalar() {
            write!(f, "Int({n})")
        } else if self.is_empty() {
            f.write_str("Empty")
        } else {
            write!(f, "Ref({:#x})", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Block = 0,
    Closure = 1,
    Lazy = 2,
    Forcing = 3,
    Forward = 4,
    Ephemeron = 5,
    PromotionBusy = 6,
}

impl Tag {
    pub const ALL: [Tag; 7] = [
        Tag::Block,
        Tag::Closure,
        Tag::Lazy,
        Tag::Forcing,
        Tag::Forward,
        Tag::Ephemeron,
        Tag::PromotionBusy,
    ];

    pub fn from_bits(bits: u8) -> Option<Tag> {
        Tag::ALL.get(bits as usize).copied()
    }
}

const COLOR_MASK: u64 = 0b11;
const TAG_SHIFT: u32 = 2;
const TAG_MASK: u64 = 0xff << TAG_SHIFT;
const SIZE_SHIFT: u32 = 10;
pub const MAX_OBJECT_WORDS: usize = (1usize << (64 - SIZE_SHIFT)) - 1;

/// A packed object header. The all-zero header marks a promoted minor object
/// whose field 0 holds the forwarding reference.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Header(u64);

impl Header {
    pub const FORWARDED: Header = Header(0);

    #[inline]
    pub fn new(size_words: usize, tag: Tag, color: u8) -> Header {
        debug_assert!(size_words <= MAX_OBJECT_WORDS);
        debug_assert!(color <= 3);
        Header(((size_words as u64) << SIZE_SHIFT) | ((tag as u64) << TAG_SHIFT) | color as u64)
    }

    #[inline]
    pub const fn from_raw(raw: u64) -> Header {
        Header(raw)
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn size(self) -> usize {
        (self.0 >> SIZE_SHIFT) as usize
    }

    #[inline]
    pub fn tag(self) -> Tag {
        Tag::from_bits(((self.0 & TAG_MASK) >> TAG_SHIFT) as u8).unwrap_or(Tag::Block)
    }

    #[inline]
    pub const fn tag_bits(self) -> u8 {
        ((self.0 & TAG_MASK) >> TAG_SHIFT) as u8
    }

    #[inline]
    pub const fn color(self) -> u8 {
        (self.0 & COLOR_MASK) as u8
    }

    #[inline]
    pub const fn is_forwarded(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub const fn with_color(self, color: u8) -> Header {
        Header((self.0 & !COLOR_MASK) | color as u64)
    }

    #[inline]
    pub const fn with_tag(self, tag: Tag) -> Header {
        Header((self.0 & !TAG_MASK) | ((tag as u64) << TAG_SHIFT))
    }
}

impl fmt::Debug for Header {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_forwarded() {
            return f.write_str("Header(forwarded)");
        }
        f.debug_struct("Header")
            .field("size", &self.size())
            .field("tag", &self.tag())
            .field("color", &self.color())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GcState {
    Marked,
    Unmarked,
    Garbage,
    Free,
}

/// Assignment of the four 2-bit patterns to logical GC states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ColorMap {
    pub marked: u8,
    pub unmarked: u8,
    pub garbage: u8,
    pub free: u8,
}

impl Default for ColorMap {
    fn default() -> Self {
        ColorMap { marked: 0, unmarked: 1, garbage: 2, free: 3 }
    }
}

impl ColorMap {
    /// Relabels patterns at the end of a major cycle: what was Marked now
    /// means Unmarked, Unmarked means Garbage, Garbage means Marked.
    pub fn rotate(self) -> ColorMap {
        ColorMap {
            unmarked: self.marked,
            garbage: self.unmarked,
            marked: self.garbage,
            free: self.free,
        }
    }

    pub fn state_of(self, color: u8) -> GcState {
        if color == self.marked {
            GcState::Marked
        } else if color == self.unmarked {
            GcState::Unmarked
        } else if color == self.garbage {
            GcState::Garbage
        } else {
            GcState::Free
        }
    }

    pub fn pattern(self, state: GcState) -> u8 {
        match state {
            GcState::Marked => self.marked,
            GcState::Unmarked => self.unmarked,
            GcState::Garbage => self.garbage,
            GcState::Free => self.free,
        }
    }

    pub fn pack(self) -> u8 {
        self.marked | (self.unmarked << 2) | (self.garbage << 4) | (self.free << 6)
    }

    pub fn unpack(bits: u8) -> ColorMap {
        ColorMap {
            marked: bits & 3,
            unmarked: (bits >> 2) & 3,
            garbage: (bits >> 4) & 3,
            free: (bits >> 6) & 3,
        }
    }
}

#[inline]
pub fn logical_state(h: Header, cm: ColorMap) -> GcState {
    cm.state_of(h.color())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_encoding_examples() {
        assert_eq!(Value::encode_scalar(0).unwrap().raw(), 0x1);
        assert_eq!(Value::encode_scalar(5).unwrap().raw(), 0xB);
        // two's-complement: (-1 << 1) | 1 sets every bit
        let oracle = ((-1i64).wrapping_shl(1) | 1) as u64;
        assert_eq!(oracle, u64::MAX);
        assert_eq!(Value::encode_scalar(-1).unwrap().raw(), oracle);
    }

    #[test]
    fn scalar_range_errors() {
        assert_eq!(Value::encode_scalar(MAX_SCALAR + 1), Err(RangeError(MAX_SCALAR + 1)));
        assert_eq!(Value::encode_scalar(MIN_SCALAR - 1), Err(RangeError(MIN_SCALAR - 1)));
        assert!(Value::encode_scalar(MAX_SCALAR).is_ok());
        assert!(Value::encode_scalar(MIN_SCALAR).is_ok());
    }

    #[test]
    fn logical_state_examples() {
        let cm = ColorMap::default();
        let h = Header::new(3, Tag::Block, cm.marked);
        assert_eq!(logical_state(h, cm), GcState::Marked);
        assert_eq!(logical_state(h.with_color(cm.free), cm), GcState::Free);
        assert_eq!(logical_state(h, cm.rotate()), GcState::Unmarked);
    }

    #[test]
    fn rotation_fixes_free_and_permutes() {
        let mut cm = ColorMap::default();
        for _ in 0..4 {
            let mut pats = [cm.marked, cm.unmarked, cm.garbage, cm.free];
            pats.sort();
            assert_eq!(pats, [0, 1, 2, 3]);
            for c in 0..4u8 {
                assert_eq!(cm.pattern(cm.state_of(c)), c);
            }
            assert_eq!(ColorMap::unpack(cm.pack()), cm);
            let next = cm.rotate();
            assert_eq!(next.free, cm.free);
            cm = next;
        }
        // three rotations of the three non-free states return to the start
        assert_eq!(ColorMap::default().rotate().rotate().rotate(), ColorMap::default());
    }

    #[test]
    fn header_round_trips_all_tags_and_colors() {
        for tag in Tag::ALL {
            for color in 0..4u8 {
                for size in [1usize, 2, 127, 128, 4095, MAX_OBJECT_WORDS] {
                    let h = Header::new(size, tag, color);
                    assert_eq!((h.size(), h.tag(), h.color()), (size, tag, color));
                    assert!(!h.is_forwarded());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scalar_round_trip(n in MIN_SCALAR..=MAX_SCALAR) {
            let v = Value::encode_scalar(n).unwrap();
            prop_assert!(v.is_scalar() && !v.is_reference());
            prop_assert_eq!(v.decode_scalar(), Some(n));
        }

        #[test]
        fn scalar_xor_reference(raw in any::<u64>()) {
            let v = Value::from_raw(raw);
            prop_assert!(v.is_scalar() ^ v.is_reference());
        }

        #[test]
        fn header_round_trip(size in 1usize..=MAX_OBJECT_WORDS, tag in 0u8..7, color in 0u8..4) {
            let tag = Tag::from_bits(tag).unwrap();
            let h = Header::new(size, tag, color);
            prop_assert_eq!(Header::from_raw(h.raw()), h);
            prop_assert_eq!((h.size(), h.tag(), h.color()), (size, tag, color));
        }
    }
}
