/* tslint:disable */
/* eslint-disable */

export class Session {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Every protocol on the same task, start and seed; JSON array of summaries.
     */
    compare(setting: string, start: number): string;
    /**
     * Frame `i`; frame 0 is the scene before the first round.
     */
    frame(i: number): string;
    frame_count(): number;
    /**
     * A messy-room task drawn with `task_seed` on the named shipped scene.
     */
    constructor(scene: string, task_seed: number);
    /**
     * ASCII view of the messy scene with the chosen team at start set `start`.
     */
    preview(setting: string, start: number): string;
    /**
     * Runs one episode and keeps its frames; returns the record summary as JSON.
     */
    run(setting: string, protocol: string, start: number): string;
    /**
     * The task as JSON: label, k and every moved object with its old and new place.
     */
    task_json(): string;
}

/**
 * JSON array of protocol names, ours first.
 */
export function protocol_names(): string;

/**
 * JSON array of the shipped scene names.
 */
export function scene_names(): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_session_free: (a: number, b: number) => void;
    readonly protocol_names: () => [number, number];
    readonly scene_names: () => [number, number];
    readonly session_compare: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly session_frame: (a: number, b: number) => [number, number];
    readonly session_frame_count: (a: number) => number;
    readonly session_new: (a: number, b: number, c: number) => [number, number, number];
    readonly session_preview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly session_run: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly session_task_json: (a: number) => [number, number];
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
