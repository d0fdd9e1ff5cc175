/* tslint:disable */
/* eslint-disable */

/**
 * Nominal and robust invariant boxes for a ±`rel` parameter band.
 */
export function invariant_boxes_json(rel: number, u_max: number, t_max: number): string;

/**
 * Closed-loop run with a 27-scenario controller.
 */
export function mpc_json(mode: string, plant: string, days: number, t_max: number): string;

/**
 * Uncontrolled or constant-control outbreak under the nominal parameters.
 */
export function simulate_json(u: number, days: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly invariant_boxes_json: (a: number, b: number, c: number) => [number, number];
    readonly mpc_json: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly simulate_json: (a: number, b: number) => [number, number];
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
