/* tslint:disable */
/* eslint-disable */

/**
 * Encoded frame size at a given transmitted-grid sparsity and the link
 * budget for both the dense map and the encoded frame.
 */
export function frame_budget(sparsity: number, half_precision: boolean, channel_factor: number, downsample: boolean, rate_hz: number, rate_mbps: number): string;

/**
 * A pedestrian `pedestrian_distance` m ahead of two sensors standing at the
 * origin, with a 6 m wide van of `van_height` centred `van_distance` m out.
 */
export function occlusion(onboard_height: number, roadside_height: number, van_distance: number, van_height: number, pedestrian_distance: number, pedestrian_height: number): string;

/**
 * Target speed over a `cols` x `rows` grid of (longitudinal, lateral) gaps,
 * row-major with lateral gap increasing by row.
 */
export function speed_field(cruise_speed: number, max_longitudinal: number, max_lateral: number, cols: number, rows: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly frame_budget: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly occlusion: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly speed_field: (a: number, b: number, c: number, d: number, e: number) => [number, number];
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
