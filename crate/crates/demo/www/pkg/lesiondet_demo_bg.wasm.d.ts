/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scan_free: (a: number, b: number) => void;
export const scan_candidateCount: (a: number) => number;
export const scan_candidatesInSlice: (a: number, b: number) => [number, number];
export const scan_cropSlice: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
export const scan_detect: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const scan_edge: (a: number) => number;
export const scan_lesionCount: (a: number) => number;
export const scan_lesionSlices: (a: number) => [number, number];
export const scan_new: (a: number, b: number, c: number) => [number, number, number];
export const scan_slice: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
