/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_psddemo_free: (a: number, b: number) => void;
export const coefficientRows: (a: number, b: number, c: number) => [number, number, number, number];
export const poles: (a: number, b: number, c: number) => [number, number, number, number];
export const psdDemo: (a: number, b: number, c: number, d: number) => [number, number, number];
export const psddemo_db: (a: number) => [number, number];
export const psddemo_f_hat_n: (a: number) => number;
export const psddemo_f_test: (a: number) => number;
export const psddemo_freqs: (a: number) => [number, number];
export const psddemo_snr_db: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
