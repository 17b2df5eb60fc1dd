/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_field_profile: (a: number, b: number) => [number, number, number, number];
export const demo_fit: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const demo_linint_profile: (a: number, b: number) => [number, number, number, number];
export const demo_measured_profile: (a: number, b: number) => [number, number, number, number];
export const demo_n_views: (a: number) => number;
export const demo_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const demo_nu: (a: number) => number;
export const demo_nv: (a: number) => number;
export const demo_project: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_set_df: (a: number, b: number) => [number, number];
export const demo_skipped_views: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
