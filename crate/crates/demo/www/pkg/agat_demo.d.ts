/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    keptPatches(index: number, keep: number): string;
    constructor(seed: number, epochs: number);
    perturb(index: number, epsilon: number, steps: number): string;
    readonly imageSize: number;
    readonly patchSize: number;
}

export function flopsTable(kind: string, target: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_imageSize: (a: number) => number;
    readonly demo_keptPatches: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_patchSize: (a: number) => number;
    readonly demo_perturb: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly flopsTable: (a: number, b: number, c: number) => [number, number, number, number];
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
