/* tslint:disable */
/* eslint-disable */

/**
 * Train/gen error and nonzero fraction over `points` evenly spaced `γ = m/n`.
 */
export function learning_curve(lambda: number, alpha: number, gamma_lo: number, gamma_hi: number, points: number): string;

/**
 * The same observables over log-spaced `λ` at fixed `γ`.
 */
export function sparsity_curve(gamma: number, alpha: number, lambda_lo: number, lambda_hi: number, points: number): string;

/**
 * Histogram of Monte-Carlo draws of a limiting estimator coordinate.
 */
export function theta_histogram(gamma: number, lambda: number, alpha: number, samples: number, bins: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly learning_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly sparsity_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly theta_histogram: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
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
