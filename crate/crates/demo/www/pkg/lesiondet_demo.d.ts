/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic scan with its ground truth and the latest candidates.
 */
export class Scan {
    free(): void;
    [Symbol.dispose](): void;
    candidateCount(): number;
    candidatesInSlice(z: number): Float64Array;
    /**
     * Middle slice of a network crop centered on voxel `(x, y, z)`. With
     * every option off this is the plain crop seen at detection time.
     */
    cropSlice(x: number, y: number, z: number, seed: number, alpha: number, gamma_spread: number, flips: boolean, rotation: boolean): Uint8Array;
    /**
     * Runs candidate selection; returns the fraction of lesions hit.
     */
    detect(sigma_min_mm: number, sigma_max_mm: number, n_scales: number, threshold: number): number;
    edge(): number;
    lesionCount(): number;
    /**
     * Z index of the centroid of each lesion.
     */
    lesionSlices(): Uint32Array;
    constructor(seed: number, lesions_mean: number, noise_sigma: number);
    slice(z: number, show_mask: boolean): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scan_free: (a: number, b: number) => void;
    readonly scan_candidateCount: (a: number) => number;
    readonly scan_candidatesInSlice: (a: number, b: number) => [number, number];
    readonly scan_cropSlice: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly scan_detect: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly scan_edge: (a: number) => number;
    readonly scan_lesionCount: (a: number) => number;
    readonly scan_lesionSlices: (a: number) => [number, number];
    readonly scan_new: (a: number, b: number, c: number) => [number, number, number];
    readonly scan_slice: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
