#include <stdio.h>
#include <string.h>

#include "rac.h"

static int echo(void *user_data, const char *tool, const char *params_json, RacOutput *out) {
  (void)tool;
  ++*(int *)user_data;
  rac_output_set(out, params_json);
  return 0;
}

int main(void) {
  const char *scenario = "name = \"c-smoke\"\nkind = \"group_booking\"\nseed = 3\n";
  RacRun *run = NULL;
  if (rac_run_scenario(scenario, 0, 0, &run) != RAC_STATUS_OK) {
    fprintf(stderr, "run: %s\n", rac_last_error_message());
    return 1;
  }
  char *report = NULL;
  if (rac_run_report_json(run, &report) != RAC_STATUS_OK || !strstr(report, "\"SUCCESS\"")) {
    fprintf(stderr, "report: %s\n", report ? report : rac_last_error_message());
    return 1;
  }
  rac_string_free(report);
  rac_run_free(run);

  int calls = 0;
  RacEngineHandle *engine = NULL;
  const char *tools = "[{\"name\": \"echo\", \"inputSchema\": {\"type\": \"object\"}}]";
  if (rac_engine_new("c-engine", tools, NULL, NULL, echo, &calls, &engine) != RAC_STATUS_OK) {
    fprintf(stderr, "engine: %s\n", rac_last_error_message());
    return 1;
  }
  char *result = NULL;
  if (rac_engine_invoke(engine, "echo", "{\"x\": 1}", &result) != RAC_STATUS_OK || calls != 1) {
    fprintf(stderr, "invoke: %s\n", rac_last_error_message());
    return 1;
  }
  printf("%s\n", result);
  rac_string_free(result);
  rac_engine_free(engine);
  return 0;
}
