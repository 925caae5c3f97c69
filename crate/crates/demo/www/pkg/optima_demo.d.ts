/* tslint:disable */
/* eslint-disable */

/**
 * `[gap, standard_error, bound]` for `f(g) = amp sin(freq g)` with
 * `g ~ N(0, sigma^2)`, whose Lipschitz constant is `|amp freq|`.
 */
export function jensen_gap(amp: number, freq: number, sigma: number, n_samples: number, seed: bigint): Float64Array;

/**
 * Posterior variance ratio `var_naive / var_true` for `K = 1..=k_max`
 * replicas of `n_obs` observations in the conjugate Gaussian model.
 */
export function shrinkage_curve(n_obs: number, prior_var: number, obs_var: number, k_max: number): Float64Array;

/**
 * Row-major `size x size` raster of glyph `index` (0..4) after an affine
 * warp by rotation `omega` and translation `(tx, ty)`.
 */
export function warp_glyph(index: number, size: number, omega: number, tx: number, ty: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly jensen_gap: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly shrinkage_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly warp_glyph: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
