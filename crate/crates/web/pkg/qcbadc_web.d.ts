/* tslint:disable */
/* eslint-disable */

/**
 * Outcome of a short design, simulate, calibrate and estimate run.
 */
export class PsdDemo {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly db: Float64Array;
    /**
     * NaN when no notch was found.
     */
    readonly f_hat_n: number;
    readonly f_test: number;
    readonly freqs: Float64Array;
    readonly snr_db: number;
}

export function coefficientRows(beta_t: number, phi_kappa: number, points: number): Float64Array;

export function poles(n: number, osr: number, f_notch: number): Float64Array;

export function psdDemo(n: number, osr: number, f_notch: number, taps: number): PsdDemo;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_psddemo_free: (a: number, b: number) => void;
    readonly coefficientRows: (a: number, b: number, c: number) => [number, number, number, number];
    readonly poles: (a: number, b: number, c: number) => [number, number, number, number];
    readonly psdDemo: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly psddemo_db: (a: number) => [number, number];
    readonly psddemo_f_hat_n: (a: number) => number;
    readonly psddemo_f_test: (a: number) => number;
    readonly psddemo_freqs: (a: number) => [number, number];
    readonly psddemo_snr_db: (a: number) => number;
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
