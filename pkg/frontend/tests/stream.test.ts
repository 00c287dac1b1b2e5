import { describe, expect, it } from "vitest";

import { SSEParser, consumeEventStream } from "../src/stream.js";
import { BOT_TEXT, sseBody, turnPayload } from "./stubs.js";

describe("SSE parsing", () => {
  it("handles events split across arbitrary chunk boundaries", () => {
    const parser = new SSEParser();
    const raw = 'event: token\ndata: "Hel"\n\nevent: token\ndata: "lo"\n\n';
    const events = [];
    for (const chunk of [raw.slice(0, 5), raw.slice(5, 23), raw.slice(23)]) {
      events.push(...parser.feed(chunk));
    }
    expect(events).toEqual([
      { event: "token", data: '"Hel"' },
      { event: "token", data: '"lo"' },
    ]);
  });

  it("ignores blocks without data", () => {
    const parser = new SSEParser();
    expect(parser.feed(": keepalive\n\n")).toEqual([]);
  });
});

describe("stream consumption", () => {
  it("streamed tokens concatenate exactly to the final text", async () => {
    const payload = turnPayload();
    const chunks = ["I would", " never", " clean the", " garden."];
    const body = sseBody(
      [...chunks.map((c) => ({ event: "token", data: c })), { event: "final", data: payload }],
      5,
    );
    const tokens: string[] = [];
    let finalText = "";
    await consumeEventStream(body, {
      onToken: (t) => tokens.push(t),
      onFinal: (p) => {
        finalText = (p as { text: string }).text;
      },
    });
    expect(tokens).toEqual(chunks);
    expect(tokens.join("")).toBe(finalText);
    expect(finalText).toBe(BOT_TEXT);
  });
});
