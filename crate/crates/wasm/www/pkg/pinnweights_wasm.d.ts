/* tslint:disable */
/* eslint-disable */

/**
 * Radially binned energy of a row-major square field, bins `0..=side/2`.
 */
export function field_spectrum(field: Float64Array, side: number): Float64Array;

/**
 * Weights each strategy assigns to synthetic objective gradients.
 *
 * Objective `k` gets `scales[k] · (ρ z₀ + √(1−ρ²) z_k)` over `params`
 * entries, where the `z` are shared-seed standard normal vectors. Returns
 * one row of `scales.len()` weights per entry of [`PLAYGROUND_STRATEGIES`],
 * each row normalized to sum to one.
 */
export function playground_weights(scales: Float64Array, correlation: number, params: number, seed: number): Float64Array;

/**
 * Ratios `‖∇L_m‖ / ‖∇L_0‖` for pure-tone residuals at `k0 = 1, 2, 4, …`
 * below the Nyquist limit of a `side²` grid, for a 2×16 sine network.
 * The log-log slope is appended as the last element.
 */
export function probe_ratios(order: number, side: number, seed: number): Float64Array;

/**
 * Row-major samples of a random `modes`-term target on a periodic
 * `side × side` grid over `[0, 2π)²`.
 */
export function target_field(modes: number, seed: number, side: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly field_spectrum: (a: number, b: number, c: number) => [number, number, number, number];
    readonly playground_weights: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly probe_ratios: (a: number, b: number, c: number) => [number, number, number, number];
    readonly target_field: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
