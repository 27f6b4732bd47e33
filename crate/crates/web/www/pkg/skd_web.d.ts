/* tslint:disable */
/* eslint-disable */

export function branch_name(code: number): string;

export function confusion_metrics(csv: string): Float64Array;

export function soften_logits(logits: Float64Array, classes: number, tau: number): Float64Array;

export function teacher_weights(c_t1: number, c_t2: number, delta: number, w_min: number, low_floor: number): Float64Array;

export function weight_map(size: number, delta: number, w_min: number, low_floor: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly branch_name: (a: number) => [number, number];
    readonly confusion_metrics: (a: number, b: number) => [number, number, number, number];
    readonly soften_logits: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly teacher_weights: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly weight_map: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
