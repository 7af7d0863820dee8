/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_comparison_free: (a: number, b: number) => void;
export const compare_deck: (a: number, b: number, c: number, d: number) => [number, number, number];
export const comparison_coupled: (a: number) => [number, number];
export const comparison_dt: (a: number) => number;
export const comparison_l2: (a: number) => number;
export const comparison_replay: (a: number) => [number, number];
export const impulse_response: (a: number, b: number) => [number, number, number, number];
export const schottky_iv: (a: number, b: number, c: number) => [number, number, number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
