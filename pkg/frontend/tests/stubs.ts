/** Stubbed API transport: canned JSON routes plus a scripted SSE stream. */

import type { SkillInfo, SkillSpan, TurnPayload } from "../src/types.js";

export const SKILLS: SkillInfo[] = [
  {
    skill_id: 901,
    super_category: "Fixture",
    subcategory: "superlatives",
    guideword: "FORM: 'THE' + '-EST'",
    can_do: "Can use a word ending in '-est' after 'the'.",
    level: "A2",
    type: "FORM",
  },
  {
    skill_id: 902,
    super_category: "Fixture",
    subcategory: "would",
    guideword: "FORM: AFFIRMATIVE",
    can_do: "Can use 'would' in a statement.",
    level: "B1",
    type: "FORM",
  },
  {
    skill_id: 903,
    super_category: "Fixture",
    subcategory: "negation",
    guideword: "FORM: 'NOT' / 'NEVER'",
    can_do: "Can negate a statement.",
    level: "A1",
    type: "FORM",
  },
];

export const BOT_TEXT = "I would never clean the garden.";

// tokens: I(0) would(1) never(2) clean(3) the(4) garden(5) .(6)
export const BOT_SPANS: SkillSpan[] = [
  { skill_id: 902, start_token: 1, end_token: 2, max_probability: 0.99, tokens: ["would"] },
  {
    skill_id: 903,
    start_token: 2,
    end_token: 4,
    max_probability: 0.97,
    tokens: ["never", "clean"],
  },
];

export function turnPayload(overrides: Partial<TurnPayload> = {}): TurnPayload {
  return {
    learner_detections: [902],
    learner_spans: [],
    text: BOT_TEXT,
    skill_spans: BOT_SPANS,
    detections: [902, 903],
    metrics: { latency_seconds: 0.5, word_count: 6, satisfaction: 1.0 },
    constraints: { variant: "explicit", skills: [902, 903] },
    ...overrides,
  };
}

export function sseBody(events: { event: string; data: unknown }[], chunkSize = 7): ReadableStream<Uint8Array> {
  const raw = events
    .map((e) => `event: ${e.event}\ndata: ${JSON.stringify(e.data)}\n\n`)
    .join("");
  const encoder = new TextEncoder();
  const chunks: Uint8Array[] = [];
  for (let i = 0; i < raw.length; i += chunkSize) {
    chunks.push(encoder.encode(raw.slice(i, i + chunkSize)));
  }
  return new ReadableStream<Uint8Array>({
    start(controller) {
      for (const chunk of chunks) {
        controller.enqueue(chunk);
      }
      controller.close();
    },
  });
}

export interface RecordedRequest {
  url: string;
  method: string;
  body: unknown;
}

export function stubFetch(
  routes: Record<string, (request: RecordedRequest) => Response>,
  log: RecordedRequest[] = [],
): typeof fetch {
  return (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    const request: RecordedRequest = {
      url,
      method: init?.method ?? "GET",
      body: init?.body ? JSON.parse(String(init.body)) : null,
    };
    log.push(request);
    for (const [prefix, handler] of Object.entries(routes)) {
      if (url.includes(prefix)) {
        return handler(request);
      }
    }
    return new Response("not found", { status: 404 });
  }) as typeof fetch;
}

export function jsonResponse(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}
