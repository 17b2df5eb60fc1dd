/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    field_profile(view: number): Float32Array;
    /**
     * Fit a fresh network to the measured views; returns the validation
     * loss per epoch.
     */
    fit(epochs: number, width: number, seed: bigint): Float64Array;
    linint_profile(view: number): Float32Array;
    /**
     * Photopeak counts along the central detector row of a view.
     */
    measured_profile(view: number): Float32Array;
    n_views(): number;
    /**
     * `scene` is `"spheres"` (hot spheres in a warm ellipsoid) or
     * `"points"` (two off-centre point sources).
     */
    constructor(scene: string, counts: number, seed: bigint);
    nu(): number;
    nv(): number;
    /**
     * Noise-free photopeak primary of one view, `[u][v]`, with the
     * attenuation map and the depth-dependent blur switched on or off.
     */
    project(view: number, attenuation: boolean, blur: boolean): Float32Array;
    /**
     * Keep every `df`-th view; drops any fitted network.
     */
    set_df(df: number): void;
    skipped_views(): Uint32Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_field_profile: (a: number, b: number) => [number, number, number, number];
    readonly demo_fit: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly demo_linint_profile: (a: number, b: number) => [number, number, number, number];
    readonly demo_measured_profile: (a: number, b: number) => [number, number, number, number];
    readonly demo_n_views: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly demo_nu: (a: number) => number;
    readonly demo_nv: (a: number) => number;
    readonly demo_project: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_set_df: (a: number, b: number) => [number, number];
    readonly demo_skipped_views: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
