/**
 * Studio state machine: sketch, concept selection, identity scale, sampling
 * settings, one in-flight generation, and an immutable result gallery that
 * can restore every input of a past result.
 */

import { ApiClient, ApiError, ConceptInfo, GenerateRequest, ServiceInfo } from "./api.js";
import { bytesToBase64, encodeGrayPng } from "./png.js";
import { cloneStrokes, SketchSurface, Stroke } from "./raster.js";

export interface GalleryEntry {
    readonly jobId: string;
    readonly resultUrl: string;
    readonly strokes: readonly Stroke[];
    readonly sketchPng: Uint8Array;
    readonly identityId: string;
    readonly styleId: string | null;
    readonly scale: number;
    readonly styleScale: number | null;
    readonly steps: number;
    readonly cfg: number;
    readonly seed: number;
}

export const MIN_POLL_INTERVAL_MS = 500;

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class StudioController {
    surface: SketchSurface;
    concepts: ConceptInfo[] = [];
    identityId: string | null = null;
    styleId: string | null = null;
    scale = 1.2;
    styleScale: number | null = null;
    steps = 50;
    cfg = 9.0;
    seed = 0;
    seedLock = true;
    readonly scaleMarker = 1.4;
    readonly scaleMax = 2.0;

    busy = false;
    progress = 0;
    lastError: string | null = null;
    needsResize = false;
    readonly gallery: GalleryEntry[] = [];

    private info: ServiceInfo | null = null;
    private readonly delay: (ms: number) => Promise<void>;
    private pollIntervalMs: number;

    constructor(
        readonly api: ApiClient,
        options: { pollIntervalMs?: number; delay?: (ms: number) => Promise<void> } = {},
    ) {
        this.pollIntervalMs = Math.max(MIN_POLL_INTERVAL_MS, options.pollIntervalMs ?? MIN_POLL_INTERVAL_MS);
        this.delay = options.delay ?? sleep;
        this.surface = new SketchSurface(64, 64);
    }

    /** Fetch service config, size the canvas to it, and load concepts. */
    async init(): Promise<void> {
        this.info = await this.api.getConfig();
        const r = this.info.image_resolution;
        this.surface = new SketchSurface(r, r);
        this.scale = this.info.defaults.scale;
        this.steps = this.info.defaults.steps;
        this.cfg = this.info.defaults.cfg;
        await this.refreshConcepts();
    }

    get resolution(): number {
        return this.info ? this.info.image_resolution : this.surface.width;
    }

    async refreshConcepts(): Promise<void> {
        this.concepts = await this.api.listConcepts();
        if (this.identityId && !this.concepts.some((c) => c.id === this.identityId)) {
            this.identityId = null;
        }
        if (this.styleId && !this.concepts.some((c) => c.id === this.styleId)) {
            this.styleId = null;
        }
    }

    identityConcepts(): ConceptInfo[] {
        return this.concepts.filter((c) => c.kind === "identity");
    }

    styleConcepts(): ConceptInfo[] {
        return this.concepts.filter((c) => c.kind === "style");
    }

    canGenerate(): boolean {
        return this.identityId !== null && !this.busy;
    }

    /** Single-channel PNG export of the canvas, strokes white on black. */
    exportSketchPng(): Uint8Array {
        return encodeGrayPng(this.surface.width, this.surface.height, this.surface.rasterise());
    }

    buildRequest(sketchPng: Uint8Array): GenerateRequest {
        if (this.identityId === null) {
            throw new Error("no identity concept selected");
        }
        const concepts: { id: string; scale?: number }[] = [
            { id: this.identityId, scale: this.scale },
        ];
        if (this.styleId !== null) {
            const entry: { id: string; scale?: number } = { id: this.styleId };
            if (this.styleScale !== null) {
                entry.scale = this.styleScale;
            }
            concepts.push(entry);
        }
        return {
            concepts,
            steps: this.steps,
            cfg: this.cfg,
            seed: this.seed,
            sketch_png_base64: bytesToBase64(sketchPng),
        };
    }

    /** Submit the current state, poll to completion, append a gallery entry. */
    async generate(): Promise<GalleryEntry | null> {
        if (!this.canGenerate()) {
            throw new Error("generation unavailable: select an identity and wait for the queue");
        }
        this.busy = true;
        this.progress = 0;
        this.lastError = null;
        this.needsResize = false;
        const strokes = this.surface.getStrokes();
        const sketchPng = this.exportSketchPng();
        try {
            const jobId = await this.api.submitGenerate(this.buildRequest(sketchPng));
            let job = await this.api.getJob(jobId);
            while (job.state === "queued" || job.state === "running") {
                this.progress = job.progress;
                await this.delay(this.pollIntervalMs);
                job = await this.api.getJob(jobId);
            }
            if (job.state === "failed") {
                this.lastError = job.error ?? "generation failed";
                return null;
            }
            const entry: GalleryEntry = Object.freeze({
                jobId,
                resultUrl: this.api.resultUrl(jobId),
                strokes: Object.freeze(cloneStrokes(strokes)) as readonly Stroke[],
                sketchPng,
                identityId: this.identityId as string,
                styleId: this.styleId,
                scale: this.scale,
                styleScale: this.styleScale,
                steps: this.steps,
                cfg: this.cfg,
                seed: this.seed,
            });
            this.gallery.push(entry);
            if (!this.seedLock) {
                this.seed = (this.seed * 1103515245 + 12345) % 2147483647;
            }
            return entry;
        } catch (err) {
            if (err instanceof ApiError && err.status === 422) {
                this.needsResize = true;
            }
            this.lastError = err instanceof Error ? err.message : String(err);
            return null;
        } finally {
            this.busy = false;
            this.progress = 1;
        }
    }

    /** Put a past result's inputs back on the canvas and controls. */
    restore(entry: GalleryEntry): void {
        this.surface.setStrokes(entry.strokes);
        this.identityId = entry.identityId;
        this.styleId = entry.styleId;
        this.scale = entry.scale;
        this.styleScale = entry.styleScale;
        this.steps = entry.steps;
        this.cfg = entry.cfg;
        this.seed = entry.seed;
    }
}
