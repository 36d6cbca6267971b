//! Peak heap use of a run does not grow with the stream length.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use mcp_core::inference::EngineConfig;
use mcp_core::io::{run_engine, SynthSpec, SynthStream};
use mcp_core::{Engine, Mode};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated above the starting level while streaming `samples`
/// synthetic records through an engine.
fn peak_for(samples: usize, mode: Mode) -> usize {
    let spec = SynthSpec {
        classes: 4,
        dim: 32,
        samples,
        views: 8,
        seed: 1,
        ..SynthSpec::default()
    };
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let stream = SynthStream::new(&spec).unwrap();
    let cfg = EngineConfig {
        mode,
        ..EngineConfig::default()
    };
    let mut engine = Engine::from_prompts(&stream.header().prompts, cfg).unwrap();
    let out = run_engine(&mut engine, stream, None);
    assert!(out.error.is_none());
    assert_eq!(out.summary.samples, samples as u64);
    PEAK.load(Ordering::SeqCst) - base
}

// One test function so no other test allocates concurrently.
#[test]
fn peak_memory_is_independent_of_stream_length() {
    for mode in [Mode::Mcp, Mode::McpPlusPlus] {
        // Warm up so every cache is full before measuring.
        let short = peak_for(400, mode);
        let long = peak_for(4000, mode);
        assert!(
            long <= short + short / 10,
            "{mode:?}: peak {long} bytes for 4000 samples vs {short} for 400"
        );
    }
}
