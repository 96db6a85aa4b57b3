/* tslint:disable */
/* eslint-disable */

/**
 * Default parameters of all three operations as JSON.
 */
export function default_params(): string;

/**
 * Global and neighborhood mutual information of trained codes; see [`demo::HeatmapParams`].
 */
export function mi_heatmap(params: string): string;

/**
 * Recall and nodes visited against L0; see [`demo::CurveParams`].
 */
export function recall_curve(params: string): string;

/**
 * Trains dictionaries on a 2-D mixture; see [`demo::TrainParams`].
 */
export function train_2d(params: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly default_params: () => [number, number];
    readonly mi_heatmap: (a: number, b: number) => [number, number, number, number];
    readonly recall_curve: (a: number, b: number) => [number, number, number, number];
    readonly train_2d: (a: number, b: number) => [number, number, number, number];
    readonly __externref_table_alloc: () => number;
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
