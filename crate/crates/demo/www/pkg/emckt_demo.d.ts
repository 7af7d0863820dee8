/* tslint:disable */
/* eslint-disable */

/**
 * Port voltages of the coupled and replayed runs of one deck.
 */
export class Comparison {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly coupled: Float64Array;
    readonly dt: number;
    readonly l2: number;
    readonly replay: Float64Array;
}

/**
 * Runs `deck` (`chebyshev` or `mixer`) against the cavity both ways.
 */
export function compare_deck(deck: string, refine: number, steps: number): Comparison;

/**
 * Port impulse response `G[0][0][lag]` in ohms.
 */
export function impulse_response(refine: number, lags: number): Float64Array;

/**
 * Steady-state current (A) of the default Schottky diode at each bias in
 * `[v_min, v_max]`, swept upward from equilibrium.
 */
export function schottky_iv(v_min: number, v_max: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_comparison_free: (a: number, b: number) => void;
    readonly compare_deck: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly comparison_coupled: (a: number) => [number, number];
    readonly comparison_dt: (a: number) => number;
    readonly comparison_l2: (a: number) => number;
    readonly comparison_replay: (a: number) => [number, number];
    readonly impulse_response: (a: number, b: number) => [number, number, number, number];
    readonly schottky_iv: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
