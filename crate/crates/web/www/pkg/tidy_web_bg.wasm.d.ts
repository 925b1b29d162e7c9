/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_session_free: (a: number, b: number) => void;
export const protocol_names: () => [number, number];
export const scene_names: () => [number, number];
export const session_compare: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const session_frame: (a: number, b: number) => [number, number];
export const session_frame_count: (a: number) => number;
export const session_new: (a: number, b: number, c: number) => [number, number, number];
export const session_preview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const session_run: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const session_task_json: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
