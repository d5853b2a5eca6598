//! Raw word access and address-space reservation.
//!
//! Heap memory is addressed by plain `usize` addresses. Every heap word is
//! accessed through an `AtomicU64` view so that concurrent marking, promotion
//! claims and the lazy tag protocol can share headers without data races.

use std::io;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::WORD_BYTES;

#[inline]
fn cell<'a>(addr: usize) -> &'a AtomicU64 {
    debug_assert!(addr != 0 && addr % WORD_BYTES == 0, "bad heap address {addr:#x}");
    // SAFETY: callers only pass addresses of words inside committed heap
    // memory (pages, large blocks or minor arenas), which are 8-byte aligned
    // and live for as long as the runtime that owns them.
    unsafe { &*(addr as *const AtomicU64) }
}

#[inline]
pub(crate) fn load(addr: usize) -> u64 {
    cell(addr).load(Ordering::Relaxed)
}

#[inline]
pub(crate) fn load_acquire(addr: usize) -> u64 {
    cell(addr).load(Ordering::Acquire)
}

#[inline]
pub(crate) fn store(addr: usize, v: u64) {
    cell(addr).store(v, Ordering::Relaxed)
}

#[inline]
pub(crate) fn store_release(addr: usize, v: u64) {
    cell(addr).store(v, Ordering::Release)
}

#[inline]
pub(crate) fn swap(addr: usize, v: u64) -> u64 {
    cell(addr).swap(v, Ordering::AcqRel)
}

#[inline]
pub(crate) fn cas(addr: usize, old: u64, new: u64) -> Result<u64, u64> {
    cell(addr).compare_exchange(old, new, Ordering::AcqRel, Ordering::Acquire)
}

/// Copies `words` words from `src` to `dst`. The ranges must not overlap.
pub(crate) fn copy_words(src: usize, dst: usize, words: usize) {
    for i in 0..words {
        store(dst + i * WORD_BYTES, load(src + i * WORD_BYTES));
    }
}

/// A block of virtual address space reserved without backing storage.
/// Sub-ranges are committed on demand.
#[derive(Debug)]
pub struct Reservation {
    raw_base: usize,
    raw_len: usize,
    base: usize,
    len: usize,
}

impl Reservation {
    /// Reserves `len` bytes aligned to `align` (a power of two).
    pub fn new(len: usize, align: usize) -> io::Result<Reservation> {
        assert!(align.is_power_of_two());
        let raw_len = len + align;
        // SAFETY: anonymous PROT_NONE mapping; no existing memory is touched.
        let p = unsafe {
            libc::mmap(
                ptr::null_mut(),
                raw_len,
                libc::PROT_NONE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        let raw_base = p as usize;
        let base = (raw_base + align - 1) & !(align - 1);
        Ok(Reservation { raw_base, raw_len, base, len })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Makes `[addr, addr+len)` readable and writable.
    pub fn commit(&self, addr: usize, len: usize) -> io::Result<()> {
        assert!(addr >= self.base && addr + len <= self.base + self.len);
        // SAFETY: the range lies inside our own mapping.
        let r = unsafe { libc::mprotect(addr as *mut libc::c_void, len, libc::PROT_READ | libc::PROT_WRITE) };
        if r != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    /// Returns the pages of a committed range to the OS; contents read back
    /// as zero afterwards.
    pub fn discard(&self, addr: usize, len: usize) {
        assert!(addr >= self.base && addr + len <= self.base + self.len);
        // SAFETY: as above; MADV_DONTNEED on private anonymous memory.
        unsafe {
            libc::madvise(addr as *mut libc::c_void, len, libc::MADV_DONTNEED);
        }
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly the region returned by mmap.
        unsafe {
            libc::munmap(self.raw_base as *mut libc::c_void, self.raw_len);
        }
    }
}

// SAFETY: the reservation is just an address range.
unsafe impl Send for Reservation {}
unsafe impl Sync for Reservation {}

/// Zeroed, aligned memory from the system allocator.
pub(crate) fn sys_alloc(bytes: usize, align: usize) -> Option<usize> {
    let layout = std::alloc::Layout::from_size_align(bytes, align).ok()?;
    // SAFETY: layout has non-zero size (callers never request 0 bytes).
    let p = unsafe { std::alloc::alloc_zeroed(layout) };
    if p.is_null() {
        None
    } else {
        Some(p as usize)
    }
}

pub(crate) fn sys_free(addr: usize, bytes: usize, align: usize) {
    let layout = std::alloc::Layout::from_size_align(bytes, align).expect("layout");
    // SAFETY: addr was returned by sys_alloc with the same layout.
    unsafe { std::alloc::dealloc(addr as *mut u8, layout) }
}
