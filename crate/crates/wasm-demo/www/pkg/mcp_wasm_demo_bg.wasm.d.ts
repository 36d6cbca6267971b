/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const affinity_curve: (a: number, b: number, c: number) => [number, number];
export const compactness_sweep: (a: bigint) => [number, number];
export const run_synthetic: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
