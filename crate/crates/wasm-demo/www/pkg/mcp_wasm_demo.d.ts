/* tslint:disable */
/* eslint-disable */

/**
 * `A(x) = α·exp(−β(1 − x))` sampled at `points` values of `x` in [−1, 1].
 */
export function affinity_curve(alpha: number, beta: number, points: number): string;

/**
 * Compactness against accuracy gain over the eight-dataset spread sweep.
 */
export function compactness_sweep(seed: bigint): string;

/**
 * Stream a synthetic shift dataset through the engine and report the
 * running accuracy of the adapted and the zero-shot predictions.
 */
export function run_synthetic(spread: number, shift: number, samples: number, seed: bigint, tuned: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly affinity_curve: (a: number, b: number, c: number) => [number, number];
    readonly compactness_sweep: (a: bigint) => [number, number];
    readonly run_synthetic: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
