/* tslint:disable */
/* eslint-disable */

/**
 * `{t, norm_u, norm_uhat, lambda_fit}` for the default bump initial state.
 */
export function closedLoopNorms(lambda: number, n: number, t_end: number, open_loop: boolean): string;

/**
 * `{re, im, max_real}` of the discrete closed-loop operator.
 */
export function closedLoopSpectrum(lambda: number, n: number, open_loop: boolean): string;

/**
 * `{x, feedback, injection, max_abs_k, interior_rms}`
 */
export function kernelProfiles(lambda: number, n: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly closedLoopNorms: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly closedLoopSpectrum: (a: number, b: number, c: number) => [number, number, number, number];
    readonly kernelProfiles: (a: number, b: number) => [number, number, number, number];
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
