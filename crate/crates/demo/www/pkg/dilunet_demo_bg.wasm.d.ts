/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const kernel_vs_oracle: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const neighborhood: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const synth_sample: (a: number, b: number, c: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
