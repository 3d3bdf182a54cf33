/** Typed client for the caricature job service. */

export interface ServiceDefaults {
    steps: number;
    cfg: number;
    scale: number;
    scale_marker: number;
}

export interface ServiceInfo {
    image_resolution: number;
    backbone_signature: string;
    defaults: ServiceDefaults;
}

export interface ConceptInfo {
    id: string;
    kind: "identity" | "style";
    superclass: string;
    default_scale: number;
}

export interface JobStatus {
    id: string;
    kind: string;
    state: "queued" | "running" | "done" | "failed";
    progress: number;
    error: string | null;
    result: string | null;
}

export interface GenerateRequest {
    concepts: { id: string; scale?: number }[];
    steps: number;
    cfg: number;
    seed: number;
    sketch_png_base64: string | null;
}

export class ApiError extends Error {
    constructor(
        readonly status: number,
        message: string,
    ) {
        super(message);
    }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
    constructor(
        readonly baseUrl: string,
        private readonly fetchFn: FetchLike = (...args) => fetch(...args),
    ) {}

    private async request<T>(path: string, init?: RequestInit): Promise<T> {
        const response = await this.fetchFn(this.baseUrl + path, init);
        if (!response.ok) {
            let detail = response.statusText;
            try {
                const body = await response.json();
                if (body && typeof body.detail === "string") {
                    detail = body.detail;
                }
            } catch {
                // fall back to the status text
            }
            throw new ApiError(response.status, detail);
        }
        return (await response.json()) as T;
    }

    getConfig(): Promise<ServiceInfo> {
        return this.request<ServiceInfo>("/config");
    }

    listConcepts(): Promise<ConceptInfo[]> {
        return this.request<ConceptInfo[]>("/concepts");
    }

    getJob(id: string): Promise<JobStatus> {
        return this.request<JobStatus>(`/jobs/${id}`);
    }

    async submitGenerate(req: GenerateRequest): Promise<string> {
        const body = await this.request<{ job_id: string }>("/generate", {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify(req),
        });
        return body.job_id;
    }

    async uploadConcept(form: FormData): Promise<string> {
        const body = await this.request<{ job_id: string }>("/concepts", {
            method: "POST",
            body: form,
        });
        return body.job_id;
    }

    resultUrl(jobId: string): string {
        return `${this.baseUrl}/results/${jobId}`;
    }
}
